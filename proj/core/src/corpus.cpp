#include "dermaug/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>

#include "dermaug/csv.hpp"
#include "dermaug/error.hpp"
#include "dermaug/hashing.hpp"

namespace dermaug {
namespace {

constexpr std::array<std::string_view, kConditionCount> kConditionNames{
    "basal cell carcinoma", "folliculitis",      "nematode infection",     "neutrophilic dermatoses",
    "prurigo nodularis",    "psoriasis",         "squamous cell carcinoma",
};
constexpr std::array<std::string_view, kConditionCount> kConditionSlugs{
    "basal-cell-carcinoma", "folliculitis", "nematode-infection",      "neutrophilic-dermatoses",
    "prurigo-nodularis",    "psoriasis",    "squamous-cell-carcinoma",
};

std::string lower_trim(std::string_view text) {
  std::size_t b = 0;
  std::size_t e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  std::string out(text.substr(b, e - b));
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

const std::vector<std::string> kManifestHeader{"id", "image_path", "condition", "fst"};

}  // namespace

std::string_view condition_name(Condition c) { return kConditionNames[condition_index(c)]; }
std::string_view condition_slug(Condition c) { return kConditionSlugs[condition_index(c)]; }

std::optional<Condition> parse_condition(std::string_view text) {
  const auto key = lower_trim(text);
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    if (key == kConditionNames[i] || key == kConditionSlugs[i]) return kAllConditions[i];
  }
  return std::nullopt;
}

std::string_view fst_name(Fst f) {
  switch (f) {
    case Fst::I:
      return "I";
    case Fst::II:
      return "II";
    case Fst::V:
      return "V";
    case Fst::VI:
      return "VI";
  }
  return "?";
}

std::optional<Fst> parse_fst(std::string_view text) {
  const auto key = lower_trim(text);
  if (key == "i" || key == "1") return Fst::I;
  if (key == "ii" || key == "2") return Fst::II;
  if (key == "v" || key == "5") return Fst::V;
  if (key == "vi" || key == "6") return Fst::VI;
  return std::nullopt;
}

std::string_view group_name(SkinGroup g) { return g == SkinGroup::Light ? "light" : "dark"; }

std::optional<SkinGroup> parse_group(std::string_view text) {
  const auto key = lower_trim(text);
  if (key == "light") return SkinGroup::Light;
  if (key == "dark") return SkinGroup::Dark;
  return std::nullopt;
}

std::set<std::string> DatasetManifest::ids() const {
  std::set<std::string> out;
  for (const auto& r : records) out.insert(r.id);
  return out;
}

const ImageRecord* DatasetManifest::find(std::string_view id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

DatasetManifest DatasetManifest::filter(SkinGroup group) const {
  DatasetManifest out{source_id, {}};
  std::copy_if(records.begin(), records.end(), std::back_inserter(out.records),
               [&](const ImageRecord& r) { return r.group() == group; });
  return out;
}

DatasetManifest DatasetManifest::filter(Condition condition) const {
  DatasetManifest out{source_id, {}};
  std::copy_if(records.begin(), records.end(), std::back_inserter(out.records),
               [&](const ImageRecord& r) { return r.condition == condition; });
  return out;
}

std::size_t DatasetManifest::count(SkinGroup group) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [&](const ImageRecord& r) { return r.group() == group; }));
}

std::vector<Condition> DatasetManifest::conditions() const {
  std::array<bool, kConditionCount> seen{};
  for (const auto& r : records) seen[condition_index(r.condition)] = true;
  std::vector<Condition> out;
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    if (seen[i]) out.push_back(kAllConditions[i]);
  }
  return out;
}

void DatasetManifest::validate_unique_ids() const {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!seen.insert(records[i].id).second) {
      throw ValidationError("manifest '" + source_id + "': duplicate id '" + records[i].id +
                            "' at record " + std::to_string(i));
    }
  }
}

DatasetManifest concat(const std::vector<const DatasetManifest*>& parts, std::string source_id) {
  DatasetManifest out{std::move(source_id), {}};
  for (const auto* part : parts) {
    out.records.insert(out.records.end(), part->records.begin(), part->records.end());
  }
  out.validate_unique_ids();
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  if (table.header != kManifestHeader) {
    std::string missing;
    for (const auto& col : kManifestHeader) {
      if (table.column(col) < 0) missing += (missing.empty() ? "" : ", ") + col;
    }
    throw ValidationError(path.string() + ": header must be exactly id,image_path,condition,fst" +
                          (missing.empty() ? std::string() : " (missing column: " + missing + ")"));
  }
  const auto base = path.parent_path();
  DatasetManifest manifest;
  manifest.source_id = path.stem().string();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::string where = path.string() + ":" + std::to_string(table.line_numbers[i]);
    if (row.size() != kManifestHeader.size()) {
      throw ValidationError(where + ": expected 4 fields, found " + std::to_string(row.size()));
    }
    auto condition = parse_condition(row[2]);
    if (!condition) throw ValidationError(where + ": unknown condition '" + row[2] + "'");
    auto fst = parse_fst(row[3]);
    if (!fst) {
      throw ValidationError(where + ": fst outside supported ends of spectrum ('" + row[3] +
                            "'; expected I, II, V or VI)");
    }
    if (row[0].empty()) throw ValidationError(where + ": empty id");
    if (!seen.insert(row[0]).second) throw ValidationError(where + ": duplicate id '" + row[0] + "'");
    std::filesystem::path image = row[1];
    if (image.is_relative() && !base.empty()) image = base / image;
    manifest.records.push_back({row[0], image.lexically_normal(), *condition, *fst});
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write manifest " + path.string());
  const auto base = std::filesystem::absolute(path).parent_path().lexically_normal();
  out << csv::join(kManifestHeader) << '\n';
  for (const auto& r : manifest.records) {
    auto image = std::filesystem::absolute(r.image_path).lexically_normal();
    auto rel = image.lexically_relative(base);
    const bool beneath = !rel.empty() && rel.begin()->string() != "..";
    out << csv::join({r.id, beneath ? rel.string() : r.image_path.string(),
                      std::string(condition_name(r.condition)), std::string(fst_name(r.fst))})
        << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

GroupCounts group_counts(const DatasetManifest& manifest) {
  GroupCounts counts;
  for (auto c : kAllConditions) {
    for (auto f : kAllFst) counts[{c, f}] = 0;
  }
  for (const auto& r : manifest.records) ++counts[{r.condition, r.fst}];
  return counts;
}

DatasetManifest sample_flexible_subset(const DatasetManifest& manifest, SkinGroup group,
                                       std::size_t per_condition, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, std::string("flexible-") + std::string(group_name(group))));
  std::vector<char> chosen(manifest.records.size(), 0);
  for (auto condition : kAllConditions) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto& r = manifest.records[i];
      if (r.condition == condition && r.group() == group) pool.push_back(i);
    }
    if (per_condition == 0) continue;
    if (pool.size() < per_condition) {
      throw ValidationError("flexible subset: cell (" + std::string(condition_name(condition)) +
                            ", " + std::string(group_name(group)) + ") has " +
                            std::to_string(pool.size()) + " records, need " +
                            std::to_string(per_condition));
    }
    // Partial Fisher-Yates: the first per_condition slots are a uniform sample.
    for (std::size_t k = 0; k < per_condition; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
      chosen[pool[k]] = 1;
    }
  }
  DatasetManifest out{manifest.source_id + "/flexible-" + std::string(group_name(group)), {}};
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (chosen[i]) out.records.push_back(manifest.records[i]);
  }
  return out;
}

std::string_view scenario_name(Scenario s) {
  switch (s) {
    case Scenario::I:
      return "i";
    case Scenario::II:
      return "ii";
    case Scenario::III:
      return "iii";
  }
  return "?";
}

std::optional<Scenario> parse_scenario(std::string_view text) {
  const auto key = lower_trim(text);
  if (key == "i" || key == "1") return Scenario::I;
  if (key == "ii" || key == "2") return Scenario::II;
  if (key == "iii" || key == "3") return Scenario::III;
  return std::nullopt;
}

ScenarioSplit build_scenario(const DatasetManifest& manifest, Scenario scenario,
                             std::uint64_t seed, std::size_t per_condition) {
  manifest.validate_unique_ids();
  ScenarioSplit split;
  split.scenario = scenario;
  split.seed = seed;
  split.flexible_dark = sample_flexible_subset(manifest, SkinGroup::Dark, per_condition, seed);
  split.flexible_light = sample_flexible_subset(manifest, SkinGroup::Light, per_condition, seed);
  const auto flex_dark = split.flexible_dark.ids();
  const auto flex_light = split.flexible_light.ids();

  const std::string prefix = manifest.source_id + "/scenario-" + std::string(scenario_name(scenario));
  split.train.source_id = prefix + "/train";
  split.test.source_id = prefix + "/test";
  for (const auto& r : manifest.records) {
    const bool dark = r.group() == SkinGroup::Dark;
    const bool flexible = dark ? flex_dark.count(r.id) > 0 : flex_light.count(r.id) > 0;
    if (!dark) {
      if (!flexible) split.train.records.push_back(r);
      continue;
    }
    switch (scenario) {
      case Scenario::I:
        (flexible ? split.test : split.train).records.push_back(r);
        break;
      case Scenario::II:
        (flexible ? split.train : split.test).records.push_back(r);
        break;
      case Scenario::III:
        if (!flexible) split.test.records.push_back(r);
        break;
    }
  }
  return split;
}

namespace {

std::vector<std::string> id_list(const DatasetManifest& m) {
  std::vector<std::string> ids;
  ids.reserve(m.size());
  for (const auto& r : m.records) ids.push_back(r.id);
  return ids;
}

DatasetManifest resolve_ids(const nlohmann::json& ids, const DatasetManifest& manifest,
                            const std::string& source_id) {
  DatasetManifest out{source_id, {}};
  for (const auto& id : ids) {
    const auto* r = manifest.find(id.get<std::string>());
    if (r == nullptr) {
      throw ValidationError("split references unknown record id '" + id.get<std::string>() + "'");
    }
    out.records.push_back(*r);
  }
  return out;
}

}  // namespace

nlohmann::json split_to_json(const ScenarioSplit& split) {
  return {{"scenario", scenario_name(split.scenario)},
          {"seed", split.seed},
          {"train", id_list(split.train)},
          {"test", id_list(split.test)},
          {"flexible_dark", id_list(split.flexible_dark)},
          {"flexible_light", id_list(split.flexible_light)},
          {"train_source", split.train.source_id},
          {"test_source", split.test.source_id}};
}

ScenarioSplit split_from_json(const nlohmann::json& doc, const DatasetManifest& manifest) {
  ScenarioSplit split;
  auto scenario = parse_scenario(doc.at("scenario").get<std::string>());
  if (!scenario) throw ValidationError("split: unknown scenario");
  split.scenario = *scenario;
  split.seed = doc.at("seed").get<std::uint64_t>();
  split.train = resolve_ids(doc.at("train"), manifest, doc.value("train_source", "train"));
  split.test = resolve_ids(doc.at("test"), manifest, doc.value("test_source", "test"));
  split.flexible_dark = resolve_ids(doc.at("flexible_dark"), manifest, "flexible-dark");
  split.flexible_light = resolve_ids(doc.at("flexible_light"), manifest, "flexible-light");
  return split;
}

void save_split(const ScenarioSplit& split, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write split " + path.string());
  out << split_to_json(split).dump(2) << '\n';
}

ScenarioSplit load_split(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open split " + path.string());
  const auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ValidationError(path.string() + ": not JSON");
  return split_from_json(doc, manifest);
}

const CountTable& fitzpatrick_subset_counts() {
  static const CountTable table = [] {
    using C = Condition;
    // Rows: FST I, II, V, VI.
    const std::array<std::array<std::size_t, kConditionCount>, 4> counts{{
        {85, 30, 15, 70, 7, 113, 100},
        {156, 97, 56, 115, 28, 232, 180},
        {24, 31, 32, 31, 29, 64, 40},
        {7, 9, 12, 15, 9, 21, 23},
    }};
    CountTable t;
    for (std::size_t f = 0; f < kAllFst.size(); ++f) {
      for (std::size_t c = 0; c < kConditionCount; ++c) t[{static_cast<C>(c), kAllFst[f]}] = counts[f][c];
    }
    return t;
  }();
  return table;
}

DatasetManifest manifest_from_counts(const CountTable& counts, std::string source_id) {
  DatasetManifest m{std::move(source_id), {}};
  for (const auto& [cell, n] : counts) {
    const auto [condition, fst] = cell;
    for (std::size_t i = 0; i < n; ++i) {
      std::string id = std::string(condition_slug(condition)) + "-" + std::string(fst_name(fst)) +
                       "-" + std::to_string(i);
      m.records.push_back({id, std::filesystem::path("images") / (id + ".png"), condition, fst});
    }
  }
  return m;
}

DatasetManifest import_fitzpatrick(const std::filesystem::path& metadata_csv,
                                   const std::filesystem::path& image_dir,
                                   const std::string& image_extension) {
  const auto table = csv::read_file(metadata_csv);
  const int col_id = table.column("md5hash");
  int col_fst = table.column("fitzpatrick_scale");
  if (col_fst < 0) col_fst = table.column("fitzpatrick");
  const int col_label = table.column("label");
  if (col_id < 0 || col_fst < 0 || col_label < 0) {
    throw ValidationError(metadata_csv.string() +
                          ": expected columns md5hash, fitzpatrick_scale and label");
  }
  DatasetManifest m{"fitzpatrick17k", {}};
  std::set<std::string> seen;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const auto width = static_cast<std::size_t>(std::max({col_id, col_fst, col_label}));
    if (row.size() <= width) {
      throw ValidationError(metadata_csv.string() + ":" + std::to_string(table.line_numbers[i]) +
                            ": too few fields");
    }
    auto condition = parse_condition(row[col_label]);
    auto fst = parse_fst(row[col_fst]);
    if (!condition || !fst) continue;
    if (!seen.insert(row[col_id]).second) continue;
    m.records.push_back({row[col_id], image_dir / (row[col_id] + image_extension), *condition, *fst});
  }
  return m;
}

}  // namespace dermaug
