#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dermaug/classifier.hpp"
#include "dermaug/concept_inversion.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/error.hpp"
#include "dermaug/experiment.hpp"
#include "dermaug/lora.hpp"
#include "dermaug/synthesis.hpp"
#include "dermaug/toy_backend.hpp"
#include "dermaug/toyderm.hpp"

namespace fs = std::filesystem;
using namespace dermaug;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  fs::path out = ".";
  int threads = 1;
};

void write_json_file(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

StudyConfig study_from(const Globals& g) {
  StudyConfig c;
  if (!g.config_path.empty()) c = load_study_config(g.config_path);
  if (g.seed) {
    c.seeds = {*g.seed};
    c.toyderm.seed = *g.seed;
    c.pretrain.seed = *g.seed;
    c.inversion.seed = *g.seed;
    c.lora.seed = *g.seed;
    c.generation.seed = *g.seed;
    c.classifier.seed = *g.seed;
  }
  return c;
}

std::uint64_t seed_of(const Globals& g, const StudyConfig& c) { return g.seed ? *g.seed : c.seeds.front(); }

Scenario scenario_arg(const std::string& text) {
  auto s = parse_scenario(text);
  if (!s) throw ValidationError("unknown scenario '" + text + "' (expected i, ii or iii)");
  return *s;
}

ScenarioSplit split_arg(const std::string& split_path, const DatasetManifest& manifest) {
  return load_split(split_path, manifest);
}

/// Reads a manifest that may be a synthetic manifest (6 columns) or a plain one.
DatasetManifest any_manifest(const fs::path& path) {
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  if (header.rfind("id,image_path,condition,fst,source_id", 0) == 0) return load_synthetic_manifest(path).manifest();
  return load_manifest(path);
}

void print_metrics(const MetricsReport& m) {
  std::printf("accuracy %.2f  precision %.2f  recall %.2f  f1 %.2f\n", m.accuracy, m.precision, m.recall, m.f1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based augmentation study for skin-condition classifiers"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("--config", g.config_path, "Study configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every stage; restricts studies to this seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Intra-op threads")->check(CLI::PositiveNumber);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the effective configuration and exit");

  // import-fitzpatrick
  auto* imp = app.add_subcommand("import-fitzpatrick", "Map Fitzpatrick17k metadata to the manifest schema");
  std::string imp_csv, imp_images, imp_ext = ".jpg";
  imp->add_option("--metadata", imp_csv)->required()->check(CLI::ExistingFile);
  imp->add_option("--images", imp_images)->required();
  imp->add_option("--ext", imp_ext);

  // make-toyderm
  auto* toy = app.add_subcommand("make-toyderm", "Render the procedural toy corpus");
  std::optional<int> toy_light, toy_dark, toy_size;
  bool toy_shaped = false;
  toy->add_option("--per-class-light", toy_light);
  toy->add_option("--per-class-dark", toy_dark);
  toy->add_option("--image-size", toy_size);
  toy->add_flag("--fitzpatrick-shape", toy_shaped, "One image per cell of the 1631-image distribution");

  // make-splits
  auto* splits = app.add_subcommand("make-splits", "Build scenario splits");
  std::string sp_manifest;
  std::vector<std::string> sp_scenarios{"i", "ii", "iii"};
  splits->add_option("--manifest", sp_manifest)->required()->check(CLI::ExistingFile);
  splits->add_option("--scenario", sp_scenarios);

  // pretrain-toy
  auto* pre = app.add_subcommand("pretrain-toy", "Train the toy latent diffusion backend");
  std::string pre_manifest;
  pre->add_option("--manifest", pre_manifest)->required()->check(CLI::ExistingFile);

  // invert
  auto* inv = app.add_subcommand("invert", "Learn one concept embedding per condition");
  std::string inv_manifest, inv_split, inv_backend;
  inv->add_option("--manifest", inv_manifest)->required()->check(CLI::ExistingFile);
  inv->add_option("--split", inv_split)->required()->check(CLI::ExistingFile);
  inv->add_option("--backend", inv_backend)->required()->check(CLI::ExistingFile);

  // train-lora
  auto* lor = app.add_subcommand("train-lora", "Fine-tune low-rank adapters");
  std::string lo_manifest, lo_split, lo_backend, lo_concepts;
  lor->add_option("--manifest", lo_manifest)->required()->check(CLI::ExistingFile);
  lor->add_option("--split", lo_split)->required()->check(CLI::ExistingFile);
  lor->add_option("--backend", lo_backend)->required()->check(CLI::ExistingFile);
  lor->add_option("--concepts", lo_concepts, "Concept file; plain condition names when omitted");

  // generate
  auto* gen = app.add_subcommand("generate", "Synthesize a corpus from a split's training images");
  std::string ge_manifest, ge_split, ge_backend, ge_concepts, ge_adapters, ge_mode, ge_group;
  std::optional<double> ge_strength, ge_guidance;
  std::optional<int> ge_steps, ge_n;
  gen->add_option("--manifest", ge_manifest)->required()->check(CLI::ExistingFile);
  gen->add_option("--split", ge_split)->required()->check(CLI::ExistingFile);
  gen->add_option("--backend", ge_backend)->required()->check(CLI::ExistingFile);
  gen->add_option("--concepts", ge_concepts);
  gen->add_option("--adapters", ge_adapters);
  gen->add_option("--mode", ge_mode, "txt2img | img2img");
  gen->add_option("--target-group", ge_group, "light | dark");
  gen->add_option("--strength", ge_strength);
  gen->add_option("--guidance", ge_guidance);
  gen->add_option("--steps", ge_steps);
  gen->add_option("--n-per-real", ge_n);

  // train-clf
  auto* clf = app.add_subcommand("train-clf", "Train a condition classifier on one or more manifests");
  std::vector<std::string> clf_train;
  clf->add_option("--train", clf_train, "Manifest(s); repeat for real + synthetic")->required()->check(CLI::ExistingFile);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a classifier on a manifest");
  std::string ev_model, ev_test;
  ev->add_option("--model", ev_model)->required()->check(CLI::ExistingFile);
  ev->add_option("--test", ev_test)->required()->check(CLI::ExistingFile);

  // run-scenario
  auto* rs = app.add_subcommand("run-scenario", "Full pipeline for one scenario over all seeds");
  std::string rs_scenario = "iii";
  rs->add_option("--scenario", rs_scenario);

  // run-ablation
  auto* ab = app.add_subcommand("run-ablation", "Generation-strategy ablation on scenario i");
  std::vector<std::string> ab_strategies, ab_groups{"light", "dark"};
  ab->add_option("--strategies", ab_strategies, "Subset of the six strategies (default: all)");
  ab->add_option("--groups", ab_groups);

  // report
  auto* rep = app.add_subcommand("report", "Aggregate persisted run records into tables");
  std::string rep_runs;
  rep->add_option("--runs", rep_runs, "Runs directory (default: the config's runs_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (!print_config && app.get_subcommands().empty()) {
    std::cerr << "A subcommand is required\nRun with --help for more information.\n";
    return 1;
  }

  torch::set_num_threads(g.threads);
  try {
    StudyConfig study = study_from(g);
    const auto seed = seed_of(g, study);
    if (print_config) {
      std::cout << json(study).dump(2) << '\n';
      return 0;
    }
    fs::create_directories(g.out);
    ImageStore store;

    if (*imp) {
      auto m = import_fitzpatrick(imp_csv, imp_images, imp_ext);
      save_manifest(m, g.out / "manifest.csv");
      std::cout << "imported " << m.size() << " records to " << (g.out / "manifest.csv").string() << '\n';
    } else if (*toy) {
      auto tc = study.toyderm;
      if (toy_light) tc.per_class_light = *toy_light;
      if (toy_dark) tc.per_class_dark = *toy_dark;
      if (toy_size) tc.image_size = *toy_size;
      auto m = toy_shaped ? generate_toyderm(fitzpatrick_subset_counts(), tc, g.out)
                         : generate_toyderm(tc, g.out);
      std::cout << "wrote " << m.size() << " images to " << g.out.string() << '\n';
    } else if (*splits) {
      auto m = load_manifest(sp_manifest);
      for (const auto& name : sp_scenarios) {
        auto s = build_scenario(m, scenario_arg(name), seed, study.per_condition);
        const auto path = g.out / ("split-" + name + "-" + std::to_string(seed) + ".json");
        save_split(s, path);
        std::cout << name << ": train " << s.train.size() << " (" << s.train.count(SkinGroup::Dark) << " dark + "
                  << s.train.count(SkinGroup::Light) << " light), test " << s.test.size() << " -> "
                  << path.string() << '\n';
      }
    } else if (*pre) {
      auto m = load_manifest(pre_manifest);
      PretrainReport report;
      auto b = train_toy_backend(m, store, study.pretrain, &report);
      b->save(g.out / "backend.bin");
      write_json_file(g.out / "pretrain.json", report);
      std::cout << "backend " << b->fingerprint().substr(0, 12) << " codec tolerance " << b->codec_tolerance()
                << " -> " << (g.out / "backend.bin").string() << '\n';
    } else if (*inv) {
      auto m = load_manifest(inv_manifest);
      auto split = split_arg(inv_split, m);
      auto b = ToyBackend::load(inv_backend);
      auto ic = study.inversion;
      ic.seed = seed;
      auto concepts = invert_all_concepts(split.train, *b, ic, store);
      save_concepts(g.out / "concepts.bin", concepts);
      for (const auto& [c, e] : concepts) std::cout << e.token << " final loss " << e.meta.final_loss << '\n';
    } else if (*lor) {
      auto m = load_manifest(lo_manifest);
      auto split = split_arg(lo_split, m);
      std::shared_ptr<DiffusionBackend> b = ToyBackend::load(lo_backend);
      ConceptTokens tokens = plain_concept_words();
      if (!lo_concepts.empty()) {
        auto concepts = load_concepts(lo_concepts);
        install_concepts(*b, concepts);
        tokens = concept_tokens(concepts);
      }
      auto lc = study.lora;
      lc.seed = seed;
      LoraReport report;
      auto adapted = fit_lora(b, split.train, tokens, lc, default_prompt_builder(tokens, study.prompts), store, &report);
      save_adapters(g.out / "adapters.bin", adapted.adapters, *b);
      write_json_file(g.out / "lora.json", {{"loss_curve", report.loss_curve}});
      std::cout << adapted.adapters.size() << " adapters -> " << (g.out / "adapters.bin").string() << '\n';
    } else if (*gen) {
      auto m = load_manifest(ge_manifest);
      auto split = split_arg(ge_split, m);
      std::shared_ptr<DiffusionBackend> b = ToyBackend::load(ge_backend);
      ConceptTokens tokens = plain_concept_words();
      if (!ge_concepts.empty()) {
        auto concepts = load_concepts(ge_concepts);
        install_concepts(*b, concepts);
        tokens = concept_tokens(concepts);
      }
      std::optional<LoraSet> adapters;
      if (!ge_adapters.empty()) adapters = load_adapters(ge_adapters, *b);
      auto gc = study.generation;
      gc.seed = seed;
      if (!ge_mode.empty()) gc.mode = parse_mode(ge_mode);
      if (!ge_group.empty()) {
        auto grp = parse_group(ge_group);
        if (!grp) throw ValidationError("unknown group '" + ge_group + "'");
        gc.target_group = *grp;
      }
      if (ge_strength) gc.strength = *ge_strength;
      if (ge_guidance) gc.guidance_scale = *ge_guidance;
      if (ge_steps) gc.inference_steps = *ge_steps;
      if (ge_n) gc.n_per_real = *ge_n;
      auto corpus = synthesize_corpus(split, *b, adapters ? &*adapters : nullptr, tokens, gc, study.prompts, store, g.out);
      std::cout << corpus.records.size() << " synthetic images -> " << (g.out / "manifest.csv").string() << '\n';
    } else if (*clf) {
      std::vector<DatasetManifest> pools;
      for (const auto& p : clf_train) pools.push_back(any_manifest(p));
      std::vector<const DatasetManifest*> ptrs;
      for (const auto& p : pools) ptrs.push_back(&p);
      auto cc = study.classifier;
      cc.seed = seed;
      ClassifierTrainReport report;
      auto model = train_classifier(ptrs, cc, store, &report);
      save_classifier(g.out / "classifier.bin", model);
      write_json_file(g.out / "train.json", {{"epoch_loss", report.epoch_loss},
                                             {"train_accuracy", report.train_accuracy},
                                             {"pool_size", report.pool_size}});
      std::cout << "trained on " << report.pool_size << " images, train accuracy " << report.train_accuracy << '\n';
    } else if (*ev) {
      auto model = load_classifier(ev_model);
      auto test = any_manifest(ev_test);
      auto metrics = evaluate(model, test, store);
      write_json_file(g.out / "metrics.json", metrics);
      print_metrics(metrics);
    } else if (*rs) {
      if (study.manifest.empty() || study.backend.empty()) {
        throw ValidationError("run-scenario needs manifest and backend paths in --config");
      }
      if (g.out != ".") study.runs_dir = g.out;
      ExperimentRunner runner(study, load_manifest(study.manifest), toy_backend_factory(study.backend));
      const auto scenario = scenario_arg(rs_scenario);
      auto report = runner.run_scenario(scenario);
      const auto stem = study.runs_dir / ("report-" + std::string(scenario_name(scenario)));
      render_report(report, stem);
      write_json_file(fs::path(stem.string() + ".json"), report);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      for (const auto& t : study.train_types) {
        const auto* c = report.find(scenario, t, "accuracy");
        if (c) std::cout << train_type_name(t) << " accuracy " << format_mean_dispersion(c->mean, c->dispersion) << '\n';
      }
      if (scenario == Scenario::III) {
        const auto manifest = load_manifest(study.manifest);
        for (auto s : study.seeds) {
          auto audit = audit_purity(runner.seed_dir(scenario, s), manifest);
          std::cout << "purity audit seed " << s << ": " << (audit.passed ? "passed" : "FAILED") << " ("
                    << audit.files_checked << " reads checked)\n";
          if (!audit.passed) return 2;
        }
      }
      if (report.cells.empty()) return 2;
    } else if (*ab) {
      if (study.manifest.empty() || study.backend.empty()) {
        throw ValidationError("run-ablation needs manifest and backend paths in --config");
      }
      if (g.out != ".") study.runs_dir = g.out;
      std::vector<Strategy> grid;
      for (const auto& s : ab_strategies) {
        auto parsed = parse_strategy(s);
        if (!parsed) throw ValidationError("unknown strategy '" + s + "'");
        grid.push_back(*parsed);
      }
      if (ab_strategies.empty()) grid.assign(kAllStrategies.begin(), kAllStrategies.end());
      std::vector<SkinGroup> groups;
      for (const auto& s : ab_groups) {
        auto parsed = parse_group(s);
        if (!parsed) throw ValidationError("unknown group '" + s + "'");
        groups.push_back(*parsed);
      }
      ExperimentRunner runner(study, load_manifest(study.manifest), toy_backend_factory(study.backend));
      auto records = runner.run_ablation(grid, groups);
      render_ablation(records, study.runs_dir / "ablation");
      std::ifstream table(study.runs_dir / "ablation.md");
      std::cout << table.rdbuf();
    } else if (*rep) {
      const fs::path runs = rep_runs.empty() ? study.runs_dir : fs::path(rep_runs);
      auto records = load_run_records(runs);
      std::vector<RunRecord> scenario_records, ablation_records;
      for (auto& r : records) {
        (r.test_set == "test" ? scenario_records : ablation_records).push_back(std::move(r));
      }
      auto report = aggregate(scenario_records);
      render_report(report, g.out / "report");
      if (!ablation_records.empty()) render_ablation(ablation_records, g.out / "ablation");
      std::ifstream table(g.out / "report.md");
      std::cout << table.rdbuf();
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
