#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace dermaug {

enum class Condition : std::uint8_t {
  BasalCellCarcinoma,
  Folliculitis,
  NematodeInfection,
  NeutrophilicDermatoses,
  PrurigoNodularis,
  Psoriasis,
  SquamousCellCarcinoma,
};

inline constexpr std::size_t kConditionCount = 7;

inline constexpr std::array<Condition, kConditionCount> kAllConditions{
    Condition::BasalCellCarcinoma, Condition::Folliculitis,     Condition::NematodeInfection,
    Condition::NeutrophilicDermatoses, Condition::PrurigoNodularis, Condition::Psoriasis,
    Condition::SquamousCellCarcinoma,
};

/// Lower-case display name, e.g. "basal cell carcinoma".
std::string_view condition_name(Condition c);
/// Hyphenated slug, e.g. "basal-cell-carcinoma".
std::string_view condition_slug(Condition c);
/// Accepts the display name or the slug, case-insensitively.
std::optional<Condition> parse_condition(std::string_view text);
inline std::size_t condition_index(Condition c) { return static_cast<std::size_t>(c); }

/// Fitzpatrick skin types kept by the pipeline: both ends of the scale only.
enum class Fst : std::uint8_t { I, II, V, VI };
inline constexpr std::array<Fst, 4> kAllFst{Fst::I, Fst::II, Fst::V, Fst::VI};

std::string_view fst_name(Fst f);
/// Accepts Roman numerals or the digits 1, 2, 5, 6.
std::optional<Fst> parse_fst(std::string_view text);

enum class SkinGroup : std::uint8_t { Light, Dark };
std::string_view group_name(SkinGroup g);
std::optional<SkinGroup> parse_group(std::string_view text);

constexpr SkinGroup group_of(Fst f) {
  return (f == Fst::I || f == Fst::II) ? SkinGroup::Light : SkinGroup::Dark;
}

struct ImageRecord {
  std::string id;
  std::filesystem::path image_path;
  Condition condition = Condition::BasalCellCarcinoma;
  Fst fst = Fst::I;

  SkinGroup group() const { return group_of(fst); }
  bool operator==(const ImageRecord&) const = default;
};

/// Ordered, id-unique collection of records.
struct DatasetManifest {
  std::string source_id;
  std::vector<ImageRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::set<std::string> ids() const;
  const ImageRecord* find(std::string_view id) const;
  /// Records of one group, in manifest order.
  DatasetManifest filter(SkinGroup group) const;
  DatasetManifest filter(Condition condition) const;
  std::size_t count(SkinGroup group) const;
  /// Conditions present, in enum order.
  std::vector<Condition> conditions() const;

  /// Throws ValidationError on a duplicate id.
  void validate_unique_ids() const;
};

/// Record-wise concatenation; the result must stay id-unique.
DatasetManifest concat(const std::vector<const DatasetManifest*>& parts, std::string source_id);

/// Loads a CSV with header exactly `id,image_path,condition,fst`. Relative image
/// paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes the CSV schema; image paths are written relative to the manifest's
/// directory when they live beneath it.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

using GroupCounts = std::map<std::pair<Condition, Fst>, std::size_t>;

/// Counts for all 28 (condition, fst) cells, zeros included.
GroupCounts group_counts(const DatasetManifest& manifest);

/// Uniform sample without replacement of `per_condition` records from every
/// condition of `group`. The result keeps manifest order and depends only on
/// (manifest, group, per_condition, seed).
DatasetManifest sample_flexible_subset(const DatasetManifest& manifest, SkinGroup group,
                                       std::size_t per_condition, std::uint64_t seed);

enum class Scenario : std::uint8_t { I, II, III };
std::string_view scenario_name(Scenario s);  // "i", "ii", "iii"
std::optional<Scenario> parse_scenario(std::string_view text);

struct ScenarioSplit {
  Scenario scenario = Scenario::I;
  DatasetManifest train;
  DatasetManifest test;
  DatasetManifest flexible_dark;
  DatasetManifest flexible_light;
  std::uint64_t seed = 0;
};

/// Both flexible subsets are always sampled and excluded from training:
///   i   train = non-flexible dark + non-flexible light, test = flexible dark
///   ii  train = flexible dark + non-flexible light,     test = non-flexible dark
///   iii train = non-flexible light,                     test = non-flexible dark
ScenarioSplit build_scenario(const DatasetManifest& manifest, Scenario scenario,
                             std::uint64_t seed, std::size_t per_condition = 8);

/// Split files list record ids per partition plus scenario and seed.
nlohmann::json split_to_json(const ScenarioSplit& split);
ScenarioSplit split_from_json(const nlohmann::json& doc, const DatasetManifest& manifest);
void save_split(const ScenarioSplit& split, const std::filesystem::path& path);
ScenarioSplit load_split(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Per-(condition, fst) record counts used to synthesize manifests of a given shape.
using CountTable = std::map<std::pair<Condition, Fst>, std::size_t>;

/// The 1631-image, 7-condition distribution of the Fitzpatrick17k subset.
const CountTable& fitzpatrick_subset_counts();

/// Manifest with placeholder image paths matching `counts`; ids are stable.
DatasetManifest manifest_from_counts(const CountTable& counts, std::string source_id);

/// Maps a Fitzpatrick17k metadata CSV (md5hash, fitzpatrick_scale, label) to the
/// manifest schema, keeping the 7 conditions and FST I, II, V, VI.
DatasetManifest import_fitzpatrick(const std::filesystem::path& metadata_csv,
                                   const std::filesystem::path& image_dir,
                                   const std::string& image_extension = ".jpg");

}  // namespace dermaug
