#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dermaug/corpus.hpp"

namespace dermaug {

/// Procedural stand-in corpus: one lesion shape family and texture frequency
/// per condition, drawn over a skin background whose luminance band is set by
/// the skin group. Lesion identity and skin group are separable by construction.
struct ToyDermConfig {
  int n_classes = 7;
  int per_class_light = 20;
  int per_class_dark = 20;
  int image_size = 64;
  std::array<double, 2> light_luminance_range{0.65, 0.9};
  std::array<double, 2> dark_luminance_range{0.1, 0.35};
  std::uint64_t seed = 0;

  /// Throws ValidationError on overlapping luminance bands, image_size < 16,
  /// negative counts or n_classes outside [1, 7].
  void validate() const;
};

void to_json(nlohmann::json& j, const ToyDermConfig& c);
void from_json(const nlohmann::json& j, ToyDermConfig& c);

/// Renders one image [3, S, S] in [0, 1]. Deterministic in all arguments.
torch::Tensor render_toyderm_image(Condition condition, std::uint64_t seed, int image_size,
                                   double luminance_lo, double luminance_hi);

/// Writes `images/<id>.png` and `manifest.csv` under `out_dir` and returns the
/// manifest. Records are ordered by condition, then light before dark.
DatasetManifest generate_toyderm(const ToyDermConfig& config, const std::filesystem::path& out_dir,
                                 const std::string& source_id = "toyderm");

/// Same renderer, one image per entry of `counts` (e.g. fitzpatrick_subset_counts());
/// only image_size, luminance bands and seed are taken from `style`.
DatasetManifest generate_toyderm(const CountTable& counts, const ToyDermConfig& style,
                                 const std::filesystem::path& out_dir, const std::string& source_id = "toyderm");

}  // namespace dermaug
