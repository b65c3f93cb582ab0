#include "dermaug/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "dermaug/csv.hpp"
#include "dermaug/error.hpp"
#include "dermaug/hashing.hpp"

namespace dermaug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw StageError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw StageError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

std::string digest_json(const json& doc) { return sha256_hex(doc.dump()); }

/// Digest over record metadata and, where present, image bytes.
std::string manifest_digest(const DatasetManifest& m) {
  Sha256 h;
  for (const auto& r : m.records) {
    h.update(r.id).update("\x1f");
    h.update(condition_slug(r.condition)).update("\x1f");
    h.update(fst_name(r.fst)).update("\x1f");
    std::error_code ec;
    if (fs::is_regular_file(r.image_path, ec)) {
      h.update(read_text(r.image_path));
    } else {
      h.update(r.image_path.string());
    }
    h.update("\x1e");
  }
  return h.hex_digest();
}

std::string ids_digest(const DatasetManifest& m) {
  Sha256 h;
  for (const auto& r : m.records) h.update(r.id).update("\n");
  return h.hex_digest();
}

const DatasetManifest& test_partition(const ScenarioSplit& split, const std::string& name) {
  if (name == "test") return split.test;
  if (name == "flexible_light") return split.flexible_light;
  if (name == "flexible_dark") return split.flexible_dark;
  throw ValidationError("unknown test set '" + name + "'");
}

std::string group_suffix(SkinGroup g) { return std::string(group_name(g)); }

}  // namespace

std::string_view train_type_name(TrainType t) {
  switch (t) {
    case TrainType::Real: return "real";
    case TrainType::Syn: return "syn";
    case TrainType::RealSyn: return "real+syn";
  }
  return "real";
}

std::optional<TrainType> parse_train_type(std::string_view text) {
  for (auto t : kAllTrainTypes) {
    if (train_type_name(t) == text) return t;
  }
  if (text == "real_syn" || text == "realsyn") return TrainType::RealSyn;
  return std::nullopt;
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::VanillaTxt2Img: return "vanilla-txt2img";
    case Strategy::VanillaImg2Img: return "vanilla-img2img";
    case Strategy::TiTxt2Img: return "ti-txt2img";
    case Strategy::TiImg2Img: return "ti-img2img";
    case Strategy::LoraImg2Img: return "lora-img2img";
    case Strategy::TiLoraImg2Img: return "ti+lora-img2img";
  }
  return "ti+lora-img2img";
}

std::optional<Strategy> parse_strategy(std::string_view text) {
  for (auto s : kAllStrategies) {
    if (strategy_name(s) == text) return s;
  }
  return std::nullopt;
}

bool uses_inversion(Strategy s) {
  return s == Strategy::TiTxt2Img || s == Strategy::TiImg2Img || s == Strategy::TiLoraImg2Img;
}

bool uses_lora(Strategy s) { return s == Strategy::LoraImg2Img || s == Strategy::TiLoraImg2Img; }

GenerationMode strategy_mode(Strategy s) {
  return (s == Strategy::VanillaTxt2Img || s == Strategy::TiTxt2Img) ? GenerationMode::Txt2Img
                                                                      : GenerationMode::Img2Img;
}

// ---------------------------------------------------------------------------
// Configuration

void StudyConfig::validate() const {
  if (seeds.empty()) throw ValidationError("study: at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ValidationError("study: duplicate seed");
  }
  if (train_types.empty()) throw ValidationError("study: at least one train type is required");
  inversion.validate();
  lora.validate();
  generation.validate();
  prompts.validate();
  classifier.validate();
}

void to_json(json& j, const StudyConfig& c) {
  std::vector<std::string> types;
  for (auto t : c.train_types) types.emplace_back(train_type_name(t));
  j = {{"manifest", c.manifest.string()},
       {"backend", c.backend.string()},
       {"runs_dir", c.runs_dir.string()},
       {"seeds", c.seeds},
       {"per_condition", c.per_condition},
       {"train_types", types},
       {"strategy", strategy_name(c.strategy)},
       {"reuse_generator", c.reuse_generator},
       {"toyderm", c.toyderm},
       {"pretrain", c.pretrain},
       {"inversion", c.inversion},
       {"lora", c.lora},
       {"generation", c.generation},
       {"prompts", c.prompts},
       {"classifier", c.classifier}};
}

void from_json(const json& j, StudyConfig& c) {
  StudyConfig d;
  c.manifest = j.value("manifest", d.manifest.string());
  c.backend = j.value("backend", d.backend.string());
  c.runs_dir = j.value("runs_dir", d.runs_dir.string());
  c.seeds = j.value("seeds", d.seeds);
  c.per_condition = j.value("per_condition", d.per_condition);
  c.train_types = d.train_types;
  if (j.contains("train_types")) {
    c.train_types.clear();
    for (const auto& t : j.at("train_types")) {
      auto parsed = parse_train_type(t.get<std::string>());
      if (!parsed) throw ValidationError("study: unknown train type '" + t.get<std::string>() + "'");
      c.train_types.push_back(*parsed);
    }
  }
  c.strategy = d.strategy;
  if (j.contains("strategy")) {
    auto parsed = parse_strategy(j.at("strategy").get<std::string>());
    if (!parsed) throw ValidationError("study: unknown strategy '" + j.at("strategy").get<std::string>() + "'");
    c.strategy = *parsed;
  }
  c.reuse_generator = j.value("reuse_generator", d.reuse_generator);
  c.toyderm = j.contains("toyderm") ? j.at("toyderm").get<ToyDermConfig>() : d.toyderm;
  c.pretrain = j.contains("pretrain") ? j.at("pretrain").get<PretrainConfig>() : d.pretrain;
  c.inversion = j.contains("inversion") ? j.at("inversion").get<InversionConfig>() : d.inversion;
  c.lora = j.contains("lora") ? j.at("lora").get<LoraConfig>() : d.lora;
  c.generation = j.contains("generation") ? j.at("generation").get<GenerationConfig>() : d.generation;
  c.prompts = j.contains("prompts") ? j.at("prompts").get<PromptTemplate>() : d.prompts;
  c.classifier = j.contains("classifier") ? j.at("classifier").get<ClassifierConfig>() : d.classifier;
}

StudyConfig load_study_config(const fs::path& path) {
  StudyConfig c;
  try {
    c = read_json(path).get<StudyConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative() && !base.empty()) p = (base / p).lexically_normal();
  };
  resolve(c.manifest);
  resolve(c.backend);
  resolve(c.runs_dir);
  c.validate();
  return c;
}

ConfigStore::ConfigStore(fs::path root) : root_(std::move(root)) {}

std::string ConfigStore::put(const json& doc) const {
  const auto digest = digest_json(doc);
  const auto path = root_ / (digest + ".json");
  if (!fs::exists(path)) write_json(path, doc);
  return digest;
}

json ConfigStore::get(const std::string& digest) const {
  const auto path = root_ / (digest + ".json");
  if (!fs::exists(path)) throw ValidationError("config store has no entry " + digest);
  auto doc = read_json(path);
  if (digest_json(doc) != digest) throw ValidationError("config store entry " + digest + " is corrupt");
  return doc;
}

bool ConfigStore::contains(const std::string& digest) const { return fs::exists(root_ / (digest + ".json")); }

// ---------------------------------------------------------------------------
// Records and aggregation

void to_json(json& j, const RunRecord& r) {
  j = {{"scenario", scenario_name(r.scenario)},
       {"train_type", train_type_name(r.train_type)},
       {"generation_strategy", strategy_name(r.strategy)},
       {"seed", r.seed},
       {"test_set", r.test_set},
       {"target_group", group_name(r.target_group)},
       {"fingerprints",
        {{"study", r.study_fingerprint},
         {"generator", r.generator_fingerprint},
         {"synthesis", r.synthesis_fingerprint},
         {"classifier", r.classifier_fingerprint}}},
       {"metrics", r.metrics},
       {"started_at", r.started_at},
       {"finished_at", r.finished_at},
       {"status", r.status},
       {"error", r.error}};
}

void from_json(const json& j, RunRecord& r) {
  auto scenario = parse_scenario(j.at("scenario").get<std::string>());
  auto type = parse_train_type(j.at("train_type").get<std::string>());
  auto strategy = parse_strategy(j.at("generation_strategy").get<std::string>());
  auto group = parse_group(j.value("target_group", std::string("dark")));
  if (!scenario || !type || !strategy || !group) throw ValidationError("run record has an unknown enum value");
  r.scenario = *scenario;
  r.train_type = *type;
  r.strategy = *strategy;
  r.target_group = *group;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.test_set = j.value("test_set", std::string("test"));
  const auto& f = j.at("fingerprints");
  r.study_fingerprint = f.value("study", std::string());
  r.generator_fingerprint = f.value("generator", std::string());
  r.synthesis_fingerprint = f.value("synthesis", std::string());
  r.classifier_fingerprint = f.value("classifier", std::string());
  r.status = j.value("status", std::string("ok"));
  r.error = j.value("error", std::string());
  if (r.status == "ok") r.metrics = metrics_from_json(j.at("metrics"));
  r.started_at = j.value("started_at", std::string());
  r.finished_at = j.value("finished_at", std::string());
}

std::pair<double, double> mean_and_sample_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

const AggregateCell* AggregateReport::find(Scenario s, TrainType t, const std::string& metric) const {
  for (const auto& c : cells) {
    if (c.scenario == s && c.train_type == t && c.metric == metric) return &c;
  }
  return nullptr;
}

void to_json(json& j, const AggregateReport& a) {
  j = {{"cells", json::array()},
       {"records", a.records},
       {"warnings", a.warnings},
       {"dispersion", "sample standard deviation over seeds"}};
  for (const auto& c : a.cells) {
    j["cells"].push_back({{"scenario", scenario_name(c.scenario)},
                          {"train_type", train_type_name(c.train_type)},
                          {"metric", c.metric},
                          {"mean", c.mean},
                          {"dispersion", c.dispersion},
                          {"n_seeds", c.n_seeds}});
  }
}

AggregateReport aggregate(const std::vector<RunRecord>& records) {
  AggregateReport out;
  out.records = records;
  std::map<std::pair<Scenario, TrainType>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    if (r.status != "ok") {
      out.warnings.push_back("seed " + std::to_string(r.seed) + " " + std::string(train_type_name(r.train_type)) +
                             " failed: " + r.error);
      continue;
    }
    groups[{r.scenario, r.train_type}].push_back(&r);
  }
  static const char* kMetrics[] = {"accuracy", "precision", "recall", "f1"};
  for (const auto& [key, rs] : groups) {
    for (const char* metric : kMetrics) {
      std::vector<double> values;
      for (const auto* r : rs) {
        const std::string m = metric;
        values.push_back(m == "accuracy"    ? r->metrics.accuracy
                         : m == "precision" ? r->metrics.precision
                         : m == "recall"    ? r->metrics.recall
                                            : r->metrics.f1);
      }
      auto [mean, sd] = mean_and_sample_std(values);
      out.cells.push_back({key.first, key.second, metric, mean, sd, values.size()});
    }
  }
  return out;
}

bool same_metrics(const MetricsReport& a, const MetricsReport& b) {
  auto bits_equal = [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; };
  if (!bits_equal(a.accuracy, b.accuracy) || !bits_equal(a.precision, b.precision) ||
      !bits_equal(a.recall, b.recall) || !bits_equal(a.f1, b.f1)) {
    return false;
  }
  return a.labels == b.labels && a.confusion == b.confusion;
}

// ---------------------------------------------------------------------------
// Runner

BackendFactory toy_backend_factory(const fs::path& path) {
  auto prototype = std::shared_ptr<ToyBackend>(ToyBackend::load(path));
  return [prototype]() -> std::shared_ptr<DiffusionBackend> { return std::shared_ptr<ToyBackend>(prototype->clone()); };
}

struct ExperimentRunner::Generator {
  std::shared_ptr<DiffusionBackend> backend;
  ConceptTokens tokens;
  AdaptedDenoiser adapted;
  bool has_lora = false;
  std::string fingerprint;
  std::string stage_fingerprint;
  const LoraSet* lora() const { return has_lora ? &adapted.adapters : nullptr; }
};

namespace {

/// Runs `compute` in `dir` unless a finished stage with the same fingerprint is there.
template <class Compute>
StageInfo run_stage(const fs::path& dir, const std::string& stage, const std::string& fingerprint, ImageStore& store,
                    Compute&& compute) {
  const auto marker = dir / "stage.json";
  if (fs::exists(marker)) {
    try {
      const auto doc = read_json(marker);
      if (doc.value("fingerprint", std::string()) == fingerprint && doc.value("status", std::string()) == "done") {
        return {stage, fingerprint, doc.value("created_at", std::string()), true, dir};
      }
    } catch (const ValidationError&) {
    }
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir);
  store.reset_log();
  const auto created = utc_now();
  json extra = compute(dir);
  write_json(dir / "reads.json", store.reads());
  json doc = {{"stage", stage}, {"fingerprint", fingerprint}, {"created_at", created},
              {"finished_at", utc_now()}, {"status", "done"}};
  if (!extra.is_null()) doc["outputs"] = extra;
  write_json(marker, doc);
  return {stage, fingerprint, created, false, dir};
}

}  // namespace

ExperimentRunner::ExperimentRunner(StudyConfig config, DatasetManifest manifest, BackendFactory factory)
    : config_(std::move(config)),
      manifest_(std::move(manifest)),
      factory_(std::move(factory)),
      configs_(config_.runs_dir / "configs") {
  config_.validate();
  manifest_.validate_unique_ids();
  manifest_digest_ = manifest_digest(manifest_);
  json study = config_;
  study.erase("runs_dir");
  study_fingerprint_ = configs_.put({{"study", study}, {"manifest_digest", manifest_digest_}});
}

fs::path ExperimentRunner::seed_dir(Scenario scenario, std::uint64_t seed) const {
  return config_.runs_dir / std::string(scenario_name(scenario)) / std::to_string(seed);
}

ScenarioSplit ExperimentRunner::split(Scenario scenario, std::uint64_t seed) {
  const auto fp = digest_json({{"manifest", manifest_digest_},
                               {"scenario", scenario_name(scenario)},
                               {"seed", seed},
                               {"per_condition", config_.per_condition}});
  const auto dir = seed_dir(scenario, seed) / "split";
  ScenarioSplit result;
  bool computed = false;
  auto info = run_stage(dir, "split", fp, store_, [&](const fs::path& d) -> json {
    result = build_scenario(manifest_, scenario, seed, config_.per_condition);
    save_split(result, d / "split.json");
    computed = true;
    return {{"train", result.train.size()}, {"test", result.test.size()}};
  });
  if (!computed) result = load_split(dir / "split.json", manifest_);
  stage_log_.push_back(info);
  return result;
}

ExperimentRunner::Generator& ExperimentRunner::generator(Scenario scenario, std::uint64_t seed, Strategy strategy,
                                                         const ScenarioSplit& split) {
  const bool ti = uses_inversion(strategy);
  const bool lo = uses_lora(strategy);
  const std::string key = std::string(scenario_name(scenario)) + "/" + std::to_string(seed) + "/" +
                          (ti ? "ti" : "plain") + (lo ? "+lora" : "");
  if (auto it = generators_.find(key); it != generators_.end()) return *it->second;

  auto& store = store_;
  auto gen = std::make_shared<Generator>();
  // One backend per (scenario, seed): concept rows only touch prompts that name them.
  const std::string backend_key = std::string(scenario_name(scenario)) + "/" + std::to_string(seed) + "/backend";
  if (auto it = generators_.find(backend_key); it != generators_.end()) {
    gen->backend = it->second->backend;
  } else {
    auto holder = std::make_shared<Generator>();
    holder->backend = factory_();
    generators_[backend_key] = holder;
    gen->backend = holder->backend;
  }
  auto& backend = *gen->backend;
  const auto base_dir = seed_dir(scenario, seed);
  const auto split_fp = ids_digest(split.train);
  gen->tokens = plain_concept_words();
  std::string concepts_fp = "plain";

  if (ti) {
    InversionConfig ic = config_.inversion;
    ic.seed = seed;
    const auto fp = digest_json({{"backend", backend.fingerprint()}, {"train", split_fp}, {"config", ic}});
    ConceptSet concepts;
    bool computed = false;
    const auto dir = base_dir / "invert";
    auto info = run_stage(dir, "invert", fp, store, [&](const fs::path& d) -> json {
      concepts = invert_all_concepts(split.train, backend, ic, store);
      save_concepts(d / "concepts.bin", concepts);
      json losses = json::object();
      for (const auto& [c, e] : concepts) losses[e.token] = e.meta.final_loss;
      computed = true;
      return {{"final_loss", losses}};
    });
    if (!computed) concepts = load_concepts(dir / "concepts.bin");
    install_concepts(backend, concepts);
    gen->tokens = concept_tokens(concepts);
    concepts_fp = fp;
    stage_log_.push_back(info);
  }

  gen->adapted = AdaptedDenoiser{gen->backend, {}};
  std::string lora_fp = "none";
  if (lo) {
    LoraConfig lc = config_.lora;
    lc.seed = seed;
    const std::string stage = ti ? "lora-ti" : "lora-plain";
    lora_fp = digest_json({{"backend", backend.fingerprint()},
                           {"train", split_fp},
                           {"concepts", concepts_fp},
                           {"prompts", config_.prompts},
                           {"config", lc}});
    const auto dir = base_dir / stage;
    bool computed = false;
    auto info = run_stage(dir, stage, lora_fp, store, [&](const fs::path& d) -> json {
      LoraReport report;
      gen->adapted = fit_lora(gen->backend, split.train, gen->tokens, lc,
                              default_prompt_builder(gen->tokens, config_.prompts), store, &report);
      save_adapters(d / "adapters.bin", gen->adapted.adapters, backend);
      computed = true;
      return {{"loss_curve", report.loss_curve}};
    });
    if (!computed) gen->adapted.adapters = load_adapters(dir / "adapters.bin", backend);
    gen->has_lora = true;
    stage_log_.push_back(info);
  }

  NamedTensors vectors;
  for (const auto& [c, token] : gen->tokens) {
    if (ti) vectors.emplace_back(token, backend.placeholder(token));
  }
  gen->fingerprint = digest_json({{"backend", backend.fingerprint()},
                                  {"concepts", tensor_digest(vectors)},
                                  {"lora", lora_digest(gen->lora())}});
  gen->stage_fingerprint = digest_json({{"concepts", concepts_fp}, {"lora", lora_fp}});
  generators_[key] = gen;
  return *gen;
}

SyntheticCorpus ExperimentRunner::synthesize(Scenario scenario, std::uint64_t seed, Strategy strategy, SkinGroup target,
                                             const ScenarioSplit& split, const Generator& gen) {
  GenerationConfig gc = config_.generation;
  gc.mode = strategy_mode(strategy);
  gc.target_group = target;
  gc.seed = seed;
  const auto stage = "synth-" + std::string(strategy_name(strategy)) + "-" + group_suffix(target);
  const auto fp = digest_json({{"generation", generation_fingerprint(*gen.backend, gen.lora(), gen.tokens, gc,
                                                                     config_.prompts)},
                               {"train", ids_digest(split.train)},
                               {"inputs", manifest_digest_}});
  const auto dir = seed_dir(scenario, seed) / stage;
  SyntheticCorpus corpus;
  bool computed = false;
  auto info = run_stage(dir, stage, fp, store_, [&](const fs::path& d) -> json {
    corpus = synthesize_corpus(split, *gen.backend, gen.lora(), gen.tokens, gc, config_.prompts, store_, d);
    computed = true;
    return {{"records", corpus.records.size()}};
  });
  if (!computed) corpus = load_synthetic_manifest(dir / "manifest.csv");
  stage_log_.push_back(info);
  return corpus;
}

RunRecord ExperimentRunner::run_one(Scenario scenario, std::uint64_t seed, Strategy strategy, TrainType train_type,
                                    SkinGroup target_group, const std::string& test_set) {
  RunRecord rec;
  rec.scenario = scenario;
  rec.seed = seed;
  rec.strategy = strategy;
  rec.train_type = train_type;
  rec.target_group = target_group;
  rec.test_set = test_set;
  rec.study_fingerprint = study_fingerprint_;
  rec.started_at = utc_now();
  auto& store = store_;
  const auto base_dir = seed_dir(scenario, seed);

  const auto sp = split(scenario, seed);
  const auto& test = test_partition(sp, test_set);
  std::vector<const DatasetManifest*> pools;
  DatasetManifest synthetic;
  std::string pool_fp = ids_digest(sp.train);
  if (train_type != TrainType::Real) {
    const auto gen_seed = config_.reuse_generator ? config_.seeds.front() : seed;
    const auto gen_split = gen_seed == seed ? sp : split(scenario, gen_seed);
    auto& gen = generator(scenario, gen_seed, strategy, gen_split);
    rec.generator_fingerprint = gen.fingerprint;
    auto corpus = synthesize(scenario, seed, strategy, target_group, sp, gen);
    rec.synthesis_fingerprint = corpus.records.empty() ? std::string() : corpus.records.front().gen_fingerprint;
    synthetic = corpus.manifest();
    pool_fp = train_type == TrainType::Syn ? rec.synthesis_fingerprint : pool_fp + rec.synthesis_fingerprint;
  }
  if (train_type != TrainType::Syn) pools.push_back(&sp.train);
  if (train_type != TrainType::Real) pools.push_back(&synthetic);

  ClassifierConfig cc = config_.classifier;
  cc.seed = seed;
  auto name = std::string(train_type_name(train_type));
  if (train_type != TrainType::Real) name += "-" + std::string(strategy_name(strategy)) + "-" + group_suffix(target_group);
  const auto clf_fp = digest_json({{"pools", pool_fp}, {"config", cc}, {"inputs", manifest_digest_}});
  rec.classifier_fingerprint = clf_fp;

  const auto train_dir = base_dir / ("train-" + name);
  std::optional<Classifier> model;
  auto info = run_stage(train_dir, "train-" + name, clf_fp, store, [&](const fs::path& d) -> json {
    ClassifierTrainReport report;
    model = train_classifier(pools, cc, store, &report);
    save_classifier(d / "classifier.bin", *model);
    return {{"epoch_loss", report.epoch_loss}, {"train_accuracy", report.train_accuracy},
            {"pool_size", report.pool_size}};
  });
  stage_log_.push_back(info);
  if (!model) model = load_classifier(train_dir / "classifier.bin");

  const auto eval_fp = digest_json({{"classifier", clf_fp}, {"test", ids_digest(test)}});
  const auto eval_dir = base_dir / ("eval-" + name + "-" + test_set);
  auto eval_info = run_stage(eval_dir, "eval-" + name + "-" + test_set, eval_fp, store, [&](const fs::path& d) -> json {
    write_json(d / "metrics.json", json(evaluate(*model, test, store)));
    return nullptr;
  });
  stage_log_.push_back(eval_info);
  rec.metrics = metrics_from_json(read_json(eval_dir / "metrics.json"));
  rec.finished_at = utc_now();
  write_json(base_dir / "records" / (name + "-" + test_set + ".json"), rec);
  return rec;
}

AggregateReport ExperimentRunner::run_scenario(Scenario scenario) {
  std::vector<RunRecord> records;
  for (auto seed : config_.seeds) {
    for (auto type : config_.train_types) {
      try {
        records.push_back(run_one(scenario, seed, config_.strategy, type, SkinGroup::Dark, "test"));
      } catch (const std::exception& e) {
        RunRecord failed;
        failed.scenario = scenario;
        failed.seed = seed;
        failed.train_type = type;
        failed.strategy = config_.strategy;
        failed.study_fingerprint = study_fingerprint_;
        failed.status = "failed";
        failed.error = e.what();
        failed.finished_at = utc_now();
        write_json(seed_dir(scenario, seed) / "records" /
                       (std::string(train_type_name(type)) + "-failed.json"),
                   failed);
        records.push_back(std::move(failed));
        break;
      }
    }
  }
  return aggregate(records);
}

std::vector<RunRecord> ExperimentRunner::run_ablation(const std::vector<Strategy>& grid,
                                                      const std::vector<SkinGroup>& groups) {
  std::vector<RunRecord> records;
  for (auto seed : config_.seeds) {
    for (auto group : groups) {
      for (auto strategy : grid) {
        const std::string test_set = group == SkinGroup::Light ? "flexible_light" : "flexible_dark";
        try {
          records.push_back(run_one(Scenario::I, seed, strategy, TrainType::Syn, group, test_set));
        } catch (const std::exception& e) {
          RunRecord failed;
          failed.scenario = Scenario::I;
          failed.seed = seed;
          failed.train_type = TrainType::Syn;
          failed.strategy = strategy;
          failed.target_group = group;
          failed.test_set = test_set;
          failed.status = "failed";
          failed.error = e.what();
          records.push_back(std::move(failed));
        }
      }
    }
  }
  return records;
}

RunRecord rerun(const RunRecord& record, const ConfigStore& configs, const BackendFactory& factory,
                const fs::path& scratch_dir) {
  const auto doc = configs.get(record.study_fingerprint);
  StudyConfig study = doc.at("study").get<StudyConfig>();
  study.runs_dir = scratch_dir;
  std::error_code ec;
  fs::remove_all(scratch_dir, ec);
  auto manifest = load_manifest(study.manifest);
  if (manifest_digest(manifest) != doc.at("manifest_digest").get<std::string>()) {
    throw ValidationError("rerun: manifest " + study.manifest.string() + " changed since the run");
  }
  ExperimentRunner runner(study, std::move(manifest), factory);
  auto again = runner.run_one(record.scenario, record.seed, record.strategy, record.train_type, record.target_group,
                              record.test_set);
  if (!record.generator_fingerprint.empty() && again.generator_fingerprint != record.generator_fingerprint) {
    throw ValidationError("rerun: generator fingerprint differs from the record");
  }
  return again;
}

// ---------------------------------------------------------------------------
// Audit

PurityAudit audit_purity(const fs::path& seed_dir, const DatasetManifest& manifest) {
  PurityAudit audit;
  std::set<std::string> dark;
  for (const auto& r : manifest.records) {
    if (r.group() == SkinGroup::Dark) dark.insert(fs::absolute(r.image_path).lexically_normal().string());
  }
  if (!fs::is_directory(seed_dir)) {
    audit.passed = false;
    audit.violations.push_back("no run directory " + seed_dir.string());
    return audit;
  }
  for (const auto& entry : fs::directory_iterator(seed_dir)) {
    if (!entry.is_directory()) continue;
    const auto stage = entry.path().filename().string();
    if (stage.rfind("eval", 0) == 0 || stage == "records") continue;
    const auto reads_path = entry.path() / "reads.json";
    if (!fs::exists(reads_path)) continue;
    for (const auto& p : read_json(reads_path)) {
      ++audit.files_checked;
      const auto path = fs::absolute(p.get<std::string>()).lexically_normal().string();
      if (dark.count(path)) {
        ++audit.dark_real_reads;
        audit.violations.push_back(stage + " read " + path);
      }
    }
    if (stage == "split" && fs::exists(entry.path() / "split.json")) {
      const auto split = read_json(entry.path() / "split.json");
      for (const auto& id : split.at("train")) {
        const auto* r = manifest.find(id.get<std::string>());
        if (r && r->group() == SkinGroup::Dark) audit.violations.push_back("split train lists dark record " + r->id);
      }
    }
  }
  audit.passed = audit.violations.empty();
  return audit;
}

std::vector<RunRecord> load_run_records(const fs::path& runs_dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(runs_dir)) return {};
  for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json" && e.path().parent_path().filename() == "records") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) out.push_back(read_json(f).get<RunRecord>());
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string format_mean_dispersion(double mean, double dispersion) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean, dispersion);
  return buf;
}

namespace {

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  out << text;
}

}  // namespace

void render_report(const AggregateReport& report, const fs::path& out_stem) {
  std::ostringstream csv_out;
  csv_out << "scenario,train_type,metric,mean,dispersion,n_seeds\n";
  for (const auto& c : report.cells) {
    csv_out << csv::join({std::string(scenario_name(c.scenario)), std::string(train_type_name(c.train_type)), c.metric,
                          full_precision(c.mean), full_precision(c.dispersion), std::to_string(c.n_seeds)})
            << '\n';
  }
  write_text(fs::path(out_stem.string() + ".csv"), csv_out.str());

  std::ostringstream md;
  md << "| scenario | train type | accuracy | precision | recall | f1 | seeds |\n";
  md << "|---|---|---|---|---|---|---|\n";
  std::vector<std::pair<Scenario, TrainType>> rows;
  for (const auto& c : report.cells) {
    if (std::find(rows.begin(), rows.end(), std::make_pair(c.scenario, c.train_type)) == rows.end()) {
      rows.emplace_back(c.scenario, c.train_type);
    }
  }
  for (const auto& [s, t] : rows) {
    md << "| " << scenario_name(s) << " | " << train_type_name(t);
    std::size_t n = 0;
    for (const char* metric : {"accuracy", "precision", "recall", "f1"}) {
      const auto* c = report.find(s, t, metric);
      md << " | " << (c ? format_mean_dispersion(c->mean, c->dispersion) : std::string("-"));
      if (c) n = c->n_seeds;
    }
    md << " | " << n << " |\n";
  }
  if (!rows.empty()) md << "\n± is the sample standard deviation over seeds.\n";
  write_text(fs::path(out_stem.string() + ".md"), md.str());
}

void render_ablation(const std::vector<RunRecord>& records, const fs::path& out_stem) {
  static const std::map<std::pair<std::string, std::string>, double> kReference = {
      {{"light", "vanilla-txt2img"}, 18.80}, {{"light", "ti-txt2img"}, 35.36},
      {{"light", "vanilla-img2img"}, 48.21}, {{"light", "ti-img2img"}, 46.43},
      {{"light", "lora-img2img"}, 52.00},    {{"light", "ti+lora-img2img"}, 53.57},
      {{"dark", "vanilla-txt2img"}, 21.22},  {{"dark", "ti-txt2img"}, 44.64},
      {{"dark", "vanilla-img2img"}, 69.64},  {{"dark", "ti-img2img"}, 71.43},
      {{"dark", "lora-img2img"}, 73.21},     {{"dark", "ti+lora-img2img"}, 79.57}};
  std::vector<Strategy> cols;
  for (auto s : kAllStrategies) {
    if (std::any_of(records.begin(), records.end(), [&](const RunRecord& r) { return r.strategy == s; })) {
      cols.push_back(s);
    }
  }
  std::map<std::pair<SkinGroup, Strategy>, std::vector<double>> acc;
  for (const auto& r : records) {
    if (r.status == "ok") acc[{r.target_group, r.strategy}].push_back(r.metrics.accuracy);
  }
  std::ostringstream csv_out;
  csv_out << "test,strategy,mean_accuracy,dispersion,n_seeds,reference_accuracy\n";
  std::ostringstream md;
  md << "| test |";
  for (auto s : cols) md << ' ' << strategy_name(s) << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << '\n';
  for (auto g : {SkinGroup::Light, SkinGroup::Dark}) {
    bool any = false;
    for (auto s : cols) any = any || acc.count({g, s});
    if (!any) continue;
    md << "| " << group_name(g) << " (56) |";
    for (auto s : cols) {
      const auto it = acc.find({g, s});
      const auto reference = kReference.at({std::string(group_name(g)), std::string(strategy_name(s))});
      if (it == acc.end()) {
        md << " - |";
        continue;
      }
      auto [mean, sd] = mean_and_sample_std(it->second);
      char note[32];
      std::snprintf(note, sizeof note, " (reference %.2f)", reference);
      md << ' ' << format_mean_dispersion(mean, sd) << note << " |";
      csv_out << csv::join({std::string(group_name(g)), std::string(strategy_name(s)), full_precision(mean),
                            full_precision(sd), std::to_string(it->second.size()), full_precision(reference)})
              << '\n';
    }
    md << '\n';
  }
  md << "\nValues in parentheses are reference accuracies.\n";
  write_text(fs::path(out_stem.string() + ".csv"), csv_out.str());
  write_text(fs::path(out_stem.string() + ".md"), md.str());
}

std::vector<ReportRow> read_report_csv(const fs::path& path) {
  const auto table = csv::read_file(path);
  const std::vector<std::string> header{"scenario", "train_type", "metric", "mean", "dispersion", "n_seeds"};
  if (table.header != header) throw ValidationError(path.string() + ": unexpected report header");
  std::vector<ReportRow> rows;
  for (const auto& r : table.rows) {
    if (r.size() != header.size()) throw ValidationError(path.string() + ": malformed row");
    rows.push_back({r[0], r[1], r[2], std::stod(r[3]), std::stod(r[4]), static_cast<std::size_t>(std::stoull(r[5]))});
  }
  return rows;
}

}  // namespace dermaug
