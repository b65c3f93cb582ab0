#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermaug/backend.hpp"
#include "dermaug/classifier.hpp"
#include "dermaug/concept_inversion.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/image_io.hpp"
#include "dermaug/lora.hpp"
#include "dermaug/synthesis.hpp"
#include "dermaug/toy_backend.hpp"
#include "dermaug/toyderm.hpp"

namespace dermaug {

enum class TrainType { Real, Syn, RealSyn };
inline constexpr std::array<TrainType, 3> kAllTrainTypes{TrainType::Real, TrainType::Syn, TrainType::RealSyn};
std::string_view train_type_name(TrainType t);  // "real", "syn", "real+syn"
std::optional<TrainType> parse_train_type(std::string_view text);

enum class Strategy { VanillaTxt2Img, VanillaImg2Img, TiTxt2Img, TiImg2Img, LoraImg2Img, TiLoraImg2Img };
inline constexpr std::array<Strategy, 6> kAllStrategies{Strategy::VanillaTxt2Img, Strategy::TiTxt2Img,
                                                        Strategy::VanillaImg2Img, Strategy::TiImg2Img,
                                                        Strategy::LoraImg2Img,    Strategy::TiLoraImg2Img};
std::string_view strategy_name(Strategy s);  // e.g. "ti+lora-img2img"
std::optional<Strategy> parse_strategy(std::string_view text);
bool uses_inversion(Strategy s);
bool uses_lora(Strategy s);
GenerationMode strategy_mode(Strategy s);

/// Every tunable of a study, serializable as one JSON document.
struct StudyConfig {
  std::filesystem::path manifest;
  std::filesystem::path backend;
  std::filesystem::path runs_dir = "runs";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t per_condition = 8;
  std::vector<TrainType> train_types{kAllTrainTypes.begin(), kAllTrainTypes.end()};
  Strategy strategy = Strategy::TiLoraImg2Img;
  /// Train inversion and adapters once (first seed) and reuse them for every seed.
  bool reuse_generator = false;

  ToyDermConfig toyderm;
  PretrainConfig pretrain;
  InversionConfig inversion;
  LoraConfig lora;
  GenerationConfig generation;
  PromptTemplate prompts;
  ClassifierConfig classifier;

  void validate() const;
};
void to_json(nlohmann::json& j, const StudyConfig& c);
void from_json(const nlohmann::json& j, StudyConfig& c);
StudyConfig load_study_config(const std::filesystem::path& path);

/// Content-addressed store of the configuration documents runs refer to.
class ConfigStore {
 public:
  explicit ConfigStore(std::filesystem::path root);
  /// Writes `doc` under its digest (idempotent) and returns the digest.
  std::string put(const nlohmann::json& doc) const;
  nlohmann::json get(const std::string& digest) const;
  bool contains(const std::string& digest) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

struct RunRecord {
  Scenario scenario = Scenario::I;
  TrainType train_type = TrainType::Real;
  Strategy strategy = Strategy::TiLoraImg2Img;
  std::uint64_t seed = 0;
  /// Test partition the metrics refer to: "test", "flexible_light" or "flexible_dark".
  std::string test_set = "test";
  SkinGroup target_group = SkinGroup::Dark;
  std::string study_fingerprint;      // ConfigStore key of the full StudyConfig
  std::string generator_fingerprint;  // backend + concepts + adapters
  std::string synthesis_fingerprint;
  std::string classifier_fingerprint;
  MetricsReport metrics;
  std::string started_at;
  std::string finished_at;
  std::string status = "ok";  // ok | failed
  std::string error;
};
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

struct AggregateCell {
  Scenario scenario = Scenario::I;
  TrainType train_type = TrainType::Real;
  std::string metric;  // accuracy | precision | recall | f1
  double mean = 0.0;
  double dispersion = 0.0;  // sample standard deviation over seeds
  std::size_t n_seeds = 0;
};

struct AggregateReport {
  std::vector<AggregateCell> cells;
  std::vector<RunRecord> records;
  std::vector<std::string> warnings;
  const AggregateCell* find(Scenario s, TrainType t, const std::string& metric) const;
};
void to_json(nlohmann::json& j, const AggregateReport& a);

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value).
std::pair<double, double> mean_and_sample_std(const std::vector<double>& values);

/// Groups successful records by (scenario, train_type) and aggregates the four metrics.
AggregateReport aggregate(const std::vector<RunRecord>& records);

/// Record of one stage directory: runs/<scenario>/<seed>/<stage>/stage.json.
struct StageInfo {
  std::string stage;
  std::string fingerprint;
  std::string created_at;
  bool cache_hit = false;
  std::filesystem::path dir;
};

/// Fresh backend instances: inversion mutates placeholder rows, so every
/// independent pipeline starts from its own copy.
using BackendFactory = std::function<std::shared_ptr<DiffusionBackend>()>;
BackendFactory toy_backend_factory(const std::filesystem::path& path);

/// Drives the pipeline with on-disk stage caching and read logging.
class ExperimentRunner {
 public:
  ExperimentRunner(StudyConfig config, DatasetManifest manifest, BackendFactory factory);

  /// One record per (seed, train type); failures become failed records.
  AggregateReport run_scenario(Scenario scenario);

  /// Synthetic-only classifiers per (strategy, target group) on scenario i,
  /// evaluated on the flexible subset of the target group.
  std::vector<RunRecord> run_ablation(const std::vector<Strategy>& grid,
                                      const std::vector<SkinGroup>& groups = {SkinGroup::Light, SkinGroup::Dark});

  /// Single pipeline execution for one cell.
  RunRecord run_one(Scenario scenario, std::uint64_t seed, Strategy strategy, TrainType train_type,
                    SkinGroup target_group, const std::string& test_set);

  const std::vector<StageInfo>& stage_log() const { return stage_log_; }
  const StudyConfig& config() const { return config_; }
  const ConfigStore& configs() const { return configs_; }
  std::filesystem::path seed_dir(Scenario scenario, std::uint64_t seed) const;

 private:
  struct Generator;
  Generator& generator(Scenario scenario, std::uint64_t seed, Strategy strategy, const ScenarioSplit& split);
  ScenarioSplit split(Scenario scenario, std::uint64_t seed);
  SyntheticCorpus synthesize(Scenario scenario, std::uint64_t seed, Strategy strategy, SkinGroup target,
                             const ScenarioSplit& split, const Generator& gen);

  StudyConfig config_;
  DatasetManifest manifest_;
  BackendFactory factory_;
  ConfigStore configs_;
  ImageStore store_;
  std::string study_fingerprint_;
  std::string manifest_digest_;
  std::vector<StageInfo> stage_log_;
  std::map<std::string, std::shared_ptr<Generator>> generators_;
};

/// Re-executes a record from the configuration stored under its study
/// fingerprint into `scratch_dir`, ignoring every cache.
RunRecord rerun(const RunRecord& record, const ConfigStore& configs, const BackendFactory& factory,
                const std::filesystem::path& scratch_dir);

/// True when every metric and confusion cell is bit-identical.
bool same_metrics(const MetricsReport& a, const MetricsReport& b);

struct PurityAudit {
  bool passed = true;
  std::size_t files_checked = 0;
  std::size_t dark_real_reads = 0;
  std::vector<std::string> violations;
};

/// Scans every reads.json of the stages that feed classifier training in
/// `seed_dir` (split, inversion, lora, synthesis, classifier training) and
/// flags reads of dark-group real images of `manifest`. Stages whose name
/// starts with "eval" are excluded.
PurityAudit audit_purity(const std::filesystem::path& seed_dir, const DatasetManifest& manifest);

std::vector<RunRecord> load_run_records(const std::filesystem::path& runs_dir);

/// "77.98 ± 0.40".
std::string format_mean_dispersion(double mean, double dispersion);

/// Writes `<stem>.csv` (full precision) and `<stem>.md` (two-decimal table).
void render_report(const AggregateReport& report, const std::filesystem::path& out_stem);
/// 2 x |strategies| accuracy table shaped like the ablation, annotated with reference accuracies.
void render_ablation(const std::vector<RunRecord>& records, const std::filesystem::path& out_stem);

struct ReportRow {
  std::string scenario, train_type, metric;
  double mean = 0.0, dispersion = 0.0;
  std::size_t n_seeds = 0;
};
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);

}  // namespace dermaug
