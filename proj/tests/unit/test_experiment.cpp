#include "doctest_torch.hpp"

#include <fstream>
#include <set>

#include "dermaug/error.hpp"
#include "dermaug/experiment.hpp"
#include "test_support.hpp"

using namespace dermaug;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_doc(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void write_doc(const fs::path& p, const json& doc) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << doc.dump(2);
}

/// Seconds-scale study on the tiny corpus and backend.
StudyConfig fast_study(const fs::path& runs_dir) {
  StudyConfig s;
  s.manifest = fs::path(testing::tiny_corpus().records.front().image_path).parent_path().parent_path() / "manifest.csv";
  s.runs_dir = runs_dir;
  s.seeds = {0, 1};
  s.per_condition = 2;
  s.inversion.steps = 3;
  s.inversion.batch_size = 4;
  s.lora.steps = 3;
  s.lora.batch_size = 4;
  s.generation.inference_steps = 4;
  s.generation.n_per_real = 1;
  s.generation.strength = 0.5;
  s.classifier.epochs = 1;
  s.classifier.batch_size = 32;
  return s;
}

BackendFactory tiny_factory() {
  return []() -> std::shared_ptr<DiffusionBackend> { return testing::pretrained_tiny_backend(); };
}

std::set<std::string> dark_paths(const DatasetManifest& m) {
  std::set<std::string> out;
  for (const auto& r : m.records) {
    if (r.group() == SkinGroup::Dark) out.insert(fs::absolute(r.image_path).lexically_normal().string());
  }
  return out;
}

RunRecord ok_record(Scenario s, TrainType t, std::uint64_t seed, double acc, double p, double r, double f1) {
  RunRecord rec;
  rec.scenario = s;
  rec.train_type = t;
  rec.seed = seed;
  rec.metrics.accuracy = acc;
  rec.metrics.precision = p;
  rec.metrics.recall = r;
  rec.metrics.f1 = f1;
  return rec;
}

}  // namespace

TEST_CASE("names of strategies and train types") {
  for (auto s : kAllStrategies) CHECK(parse_strategy(strategy_name(s)) == s);
  for (auto t : kAllTrainTypes) CHECK(parse_train_type(train_type_name(t)) == t);
  CHECK(strategy_name(Strategy::TiLoraImg2Img) == "ti+lora-img2img");
  CHECK(train_type_name(TrainType::RealSyn) == "real+syn");
  CHECK_FALSE(parse_strategy("lora-txt2img"));
  CHECK(uses_inversion(Strategy::TiTxt2Img));
  CHECK_FALSE(uses_inversion(Strategy::LoraImg2Img));
  CHECK(uses_lora(Strategy::TiLoraImg2Img));
  CHECK_FALSE(uses_lora(Strategy::TiImg2Img));
  CHECK(strategy_mode(Strategy::VanillaTxt2Img) == GenerationMode::Txt2Img);
  CHECK(strategy_mode(Strategy::VanillaImg2Img) == GenerationMode::Img2Img);
}

TEST_CASE("study config validates and round trips") {
  StudyConfig c = fast_study("runs");
  CHECK_NOTHROW(c.validate());
  json j = c;
  StudyConfig back = j.get<StudyConfig>();
  CHECK(json(back) == j);

  auto bad = c;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = c;
  bad.seeds = {3, 3};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = c;
  bad.train_types.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  j["strategy"] = "dreambooth";
  CHECK_THROWS_AS(j.get<StudyConfig>(), ValidationError);

  const auto dir = testing::scratch_dir("study-config");
  json doc = c;
  doc["manifest"] = "data/m.csv";
  doc["runs_dir"] = "out";
  write_doc(dir / "study.json", doc);
  auto loaded = load_study_config(dir / "study.json");
  CHECK(loaded.manifest == (dir / "data/m.csv").lexically_normal());
  CHECK(loaded.runs_dir == (dir / "out").lexically_normal());
  CHECK(loaded.seeds == c.seeds);
}

TEST_CASE("config store is content addressed and detects corruption") {
  const auto dir = testing::scratch_dir("store");
  ConfigStore store(dir);
  const json doc = {{"a", 1}, {"b", {1, 2, 3}}};
  const auto key = store.put(doc);
  CHECK(key.size() == 64);
  CHECK(store.put(doc) == key);
  CHECK(store.contains(key));
  CHECK(store.get(key) == doc);
  CHECK(store.put({{"a", 2}}) != key);
  CHECK_THROWS_AS(store.get(std::string(64, '0')), ValidationError);
  write_doc(dir / (key + ".json"), {{"a", 9}});
  CHECK_THROWS_AS(store.get(key), ValidationError);
}

TEST_CASE("mean and sample standard deviation") {
  auto [m0, s0] = mean_and_sample_std({});
  CHECK(m0 == 0.0);
  CHECK(s0 == 0.0);
  auto [m1, s1] = mean_and_sample_std({4.0});
  CHECK(m1 == 4.0);
  CHECK(s1 == 0.0);
  // Two-pass oracle: values 2,4,4,4,5,5,7,9 have squared deviations summing to 32.
  auto [m, s] = mean_and_sample_std({2, 4, 4, 4, 5, 5, 7, 9});
  CHECK(m == doctest::Approx(5.0));
  CHECK(s == doctest::Approx(std::sqrt(32.0 / 7.0)));
  CHECK(format_mean_dispersion(77.981, 0.404) == "77.98 ± 0.40");
  CHECK(format_mean_dispersion(5.0, 0.0) == "5.00 ± 0.00");
}

TEST_CASE("aggregate groups by scenario and train type and skips failures") {
  std::vector<RunRecord> rs{ok_record(Scenario::III, TrainType::Real, 0, 10, 20, 30, 40),
                            ok_record(Scenario::III, TrainType::Real, 1, 20, 30, 40, 50),
                            ok_record(Scenario::III, TrainType::RealSyn, 0, 50, 50, 50, 50)};
  RunRecord failed = ok_record(Scenario::III, TrainType::RealSyn, 1, 99, 99, 99, 99);
  failed.status = "failed";
  failed.error = "boom";
  rs.push_back(failed);
  auto a = aggregate(rs);
  CHECK(a.cells.size() == 8);
  REQUIRE(a.warnings.size() == 1);
  CHECK(a.warnings[0].find("boom") != std::string::npos);
  const auto* acc = a.find(Scenario::III, TrainType::Real, "accuracy");
  REQUIRE(acc != nullptr);
  CHECK(acc->mean == doctest::Approx(15.0));
  CHECK(acc->dispersion == doctest::Approx(std::sqrt(50.0)));
  CHECK(acc->n_seeds == 2);
  const auto* f1 = a.find(Scenario::III, TrainType::RealSyn, "f1");
  REQUIRE(f1 != nullptr);
  CHECK(f1->mean == 50.0);
  CHECK(f1->n_seeds == 1);
  CHECK(a.find(Scenario::I, TrainType::Real, "accuracy") == nullptr);
  CHECK(aggregate({}).cells.empty());
}

TEST_CASE("report files") {
  const auto dir = testing::scratch_dir("report");
  auto a = aggregate({ok_record(Scenario::II, TrainType::Syn, 0, 1.0 / 3.0, 20, 30, 40),
                      ok_record(Scenario::II, TrainType::Syn, 1, 2.0 / 3.0, 30, 40, 50)});
  render_report(a, dir / "table");
  auto rows = read_report_csv(dir / "table.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].scenario == "ii");
  CHECK(rows[0].train_type == "syn");
  CHECK(rows[0].metric == "accuracy");
  CHECK(rows[0].mean == a.cells[0].mean);
  CHECK(rows[0].dispersion == a.cells[0].dispersion);
  CHECK(rows[0].n_seeds == 2);
  std::ifstream md(dir / "table.md");
  const std::string text{std::istreambuf_iterator<char>(md), std::istreambuf_iterator<char>()};
  CHECK(text.find("| ii | syn | 0.50 ± 0.24 | 25.00 ± 7.07") != std::string::npos);

  render_report(AggregateReport{}, dir / "empty");
  CHECK(read_report_csv(dir / "empty.csv").empty());

  std::ofstream(dir / "bad.csv") << "a,b\n1,2\n";
  CHECK_THROWS_AS(read_report_csv(dir / "bad.csv"), ValidationError);
}

TEST_CASE("run record json round trip") {
  RunRecord r = ok_record(Scenario::I, TrainType::Syn, 7, 1, 2, 3, 4);
  r.strategy = Strategy::LoraImg2Img;
  r.target_group = SkinGroup::Light;
  r.test_set = "flexible_light";
  r.study_fingerprint = "abc";
  r.metrics.labels = {Condition::Psoriasis};
  r.metrics.confusion = {{3}};
  json j = r;
  auto back = j.get<RunRecord>();
  CHECK(back.scenario == r.scenario);
  CHECK(back.train_type == r.train_type);
  CHECK(back.strategy == r.strategy);
  CHECK(back.seed == 7);
  CHECK(back.target_group == SkinGroup::Light);
  CHECK(back.test_set == "flexible_light");
  CHECK(back.study_fingerprint == "abc");
  CHECK(same_metrics(back.metrics, r.metrics));
  j["generation_strategy"] = "unknown";
  CHECK_THROWS_AS(j.get<RunRecord>(), ValidationError);
}

TEST_CASE("scenario iii study: cardinality, purity, caching and rerun") {
  const auto& corpus = testing::tiny_corpus();
  const auto runs = testing::scratch_dir("study-iii");
  auto cfg = fast_study(runs);
  ExperimentRunner runner(cfg, corpus, tiny_factory());
  auto report = runner.run_scenario(Scenario::III);

  REQUIRE(report.records.size() == cfg.seeds.size() * cfg.train_types.size());
  for (const auto& r : report.records) {
    CHECK_MESSAGE(r.status == "ok", r.error);
    CHECK(r.metrics.accuracy >= 0.0);
    CHECK(r.metrics.accuracy <= 100.0);
  }
  CHECK(report.warnings.empty());
  CHECK(report.cells.size() == 3 * 4);
  CHECK(report.find(Scenario::III, TrainType::RealSyn, "accuracy")->n_seeds == 2);

  const auto dark = dark_paths(corpus);
  std::set<std::string> real_paths;
  for (const auto& r : corpus.records) real_paths.insert(fs::absolute(r.image_path).lexically_normal().string());

  SUBCASE("synthetic-only training reads no real image") {
    const auto train_dir = runner.seed_dir(Scenario::III, 0) / "train-syn-ti+lora-img2img-dark";
    REQUIRE(fs::exists(train_dir / "reads.json"));
    const auto reads = read_doc(train_dir / "reads.json");
    CHECK(!reads.empty());
    for (const auto& p : reads) CHECK(real_paths.count(p.get<std::string>()) == 0);
    const auto stage = read_doc(train_dir / "stage.json");
    CHECK(stage.at("outputs").at("pool_size").get<std::size_t>() == reads.size());
  }

  SUBCASE("no dark real image reaches a training-feeding stage") {
    for (auto seed : cfg.seeds) {
      auto audit = audit_purity(runner.seed_dir(Scenario::III, seed), corpus);
      CHECK(audit.passed);
      CHECK(audit.dark_real_reads == 0);
      CHECK(audit.files_checked > 0);
    }
    // Evaluation reads the dark test set (70 dark minus the 14 flexible ones) and is excluded.
    const auto eval = read_doc(runner.seed_dir(Scenario::III, 0) / "eval-real-test" / "reads.json");
    std::size_t dark_reads = 0;
    for (const auto& p : eval) dark_reads += dark.count(p.get<std::string>());
    CHECK(dark_reads == 70 - 14);
  }

  SUBCASE("an injected dark read is flagged") {
    const auto seed_dir = runner.seed_dir(Scenario::III, 1);
    write_doc(seed_dir / "invert" / "reads.json", json::array({*dark.begin()}));
    auto audit = audit_purity(seed_dir, corpus);
    CHECK_FALSE(audit.passed);
    CHECK(audit.dark_real_reads == 1);
    REQUIRE(audit.violations.size() == 1);
    CHECK(audit.violations[0].find("invert") != std::string::npos);
    CHECK_FALSE(audit_purity(runs / "missing", corpus).passed);
  }

  SUBCASE("a second runner hits every cache and keeps creation times") {
    std::map<fs::path, std::string> created;
    for (const auto& s : runner.stage_log()) created[s.dir] = s.created_at;
    ExperimentRunner again(cfg, corpus, tiny_factory());
    auto second = again.run_scenario(Scenario::III);
    REQUIRE(!again.stage_log().empty());
    for (const auto& s : again.stage_log()) {
      CHECK_MESSAGE(s.cache_hit, s.stage);
      CHECK(s.created_at == created.at(s.dir));
    }
    REQUIRE(second.records.size() == report.records.size());
    for (std::size_t i = 0; i < second.records.size(); ++i) {
      CHECK(same_metrics(second.records[i].metrics, report.records[i].metrics));
    }
  }

  SUBCASE("a changed classifier config invalidates only downstream stages") {
    auto changed = cfg;
    changed.classifier.lr = 2e-3;
    ExperimentRunner other(changed, corpus, tiny_factory());
    other.run_one(Scenario::III, 0, cfg.strategy, TrainType::RealSyn, SkinGroup::Dark, "test");
    std::map<std::string, bool> hit;
    for (const auto& s : other.stage_log()) hit[s.stage] = s.cache_hit;
    CHECK(hit.at("split"));
    CHECK(hit.at("invert"));
    CHECK(hit.at("lora-ti"));
    CHECK(hit.at("synth-ti+lora-img2img-dark"));
    CHECK_FALSE(hit.at("train-real+syn-ti+lora-img2img-dark"));
    CHECK_FALSE(hit.at("eval-real+syn-ti+lora-img2img-dark-test"));
  }

  SUBCASE("rerun from the stored config reproduces the metrics bit for bit") {
    const auto& rec = report.records.back();
    CHECK(runner.configs().contains(rec.study_fingerprint));
    auto again = rerun(rec, runner.configs(), tiny_factory(), testing::scratch_dir("rerun"));
    CHECK(same_metrics(again.metrics, rec.metrics));
    CHECK(again.generator_fingerprint == rec.generator_fingerprint);
    CHECK(again.classifier_fingerprint == rec.classifier_fingerprint);

    auto forged = rec;
    forged.generator_fingerprint = "0";
    CHECK_THROWS_AS(rerun(forged, runner.configs(), tiny_factory(), testing::scratch_dir("rerun-forged")),
                    ValidationError);
  }

  SUBCASE("records on disk") {
    auto loaded = load_run_records(runs);
    CHECK(loaded.size() == report.records.size());
    CHECK(load_run_records(runs / "nowhere").empty());
  }
}

TEST_CASE("scenario i trains on dark images, so the audit flags it") {
  const auto& corpus = testing::tiny_corpus();
  auto cfg = fast_study(testing::scratch_dir("study-i"));
  cfg.seeds = {0};
  cfg.train_types = {TrainType::Real};
  ExperimentRunner runner(cfg, corpus, tiny_factory());
  auto report = runner.run_scenario(Scenario::I);
  REQUIRE(report.records.size() == 1);
  auto audit = audit_purity(runner.seed_dir(Scenario::I, 0), corpus);
  CHECK_FALSE(audit.passed);
  CHECK(audit.dark_real_reads > 0);
}

TEST_CASE("a failing generator becomes a failed record and a warning") {
  const auto& corpus = testing::tiny_corpus();
  auto cfg = fast_study(testing::scratch_dir("study-fail"));
  cfg.seeds = {0};
  BackendFactory broken = []() -> std::shared_ptr<DiffusionBackend> { throw StageError("backend unavailable"); };
  ExperimentRunner runner(cfg, corpus, broken);
  auto report = runner.run_scenario(Scenario::III);
  REQUIRE(report.records.size() == 2);
  CHECK(report.records[0].status == "ok");
  CHECK(report.records[1].status == "failed");
  CHECK(report.records[1].error.find("backend unavailable") != std::string::npos);
  REQUIRE(report.warnings.size() == 1);
  CHECK(report.find(Scenario::III, TrainType::Real, "accuracy") != nullptr);
  CHECK(report.find(Scenario::III, TrainType::Syn, "accuracy") == nullptr);
  CHECK(fs::exists(runner.seed_dir(Scenario::III, 0) / "records" / "syn-failed.json"));
}

TEST_CASE("ablation grid") {
  const auto& corpus = testing::tiny_corpus();
  auto cfg = fast_study(testing::scratch_dir("ablation"));
  cfg.seeds = {0};
  ExperimentRunner runner(cfg, corpus, tiny_factory());
  CHECK(runner.run_ablation({}).empty());

  auto records = runner.run_ablation({Strategy::VanillaImg2Img, Strategy::TiTxt2Img});
  REQUIRE(records.size() == 4);
  for (const auto& r : records) {
    CHECK_MESSAGE(r.status == "ok", r.error);
    CHECK(r.train_type == TrainType::Syn);
    CHECK(r.test_set == (r.target_group == SkinGroup::Light ? "flexible_light" : "flexible_dark"));
    CHECK(r.metrics.confusion.size() == 7);
    std::int64_t total = 0;
    for (const auto& row : r.metrics.confusion) {
      for (auto v : row) total += v;
    }
    CHECK(total == 14);
  }
  const auto dir = testing::scratch_dir("ablation-out");
  render_ablation(records, dir / "t");
  std::ifstream md(dir / "t.md");
  const std::string text{std::istreambuf_iterator<char>(md), std::istreambuf_iterator<char>()};
  CHECK(text.find("| test | ti-txt2img | vanilla-img2img |") != std::string::npos);
  CHECK(text.find("(reference 48.21)") != std::string::npos);
  render_ablation({}, dir / "e");
  std::ifstream csv(dir / "e.csv");
  std::string header, extra;
  std::getline(csv, header);
  CHECK(header == "test,strategy,mean_accuracy,dispersion,n_seeds,reference_accuracy");
  CHECK_FALSE(std::getline(csv, extra));
}
