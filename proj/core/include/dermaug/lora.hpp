#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dermaug/backend.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/image_io.hpp"
#include "dermaug/lora_types.hpp"
#include "dermaug/synthesis.hpp"

namespace dermaug {

/// Frozen base backend plus low-rank adapters keyed by projection site.
struct AdaptedDenoiser {
  std::shared_ptr<DiffusionBackend> base;
  LoraSet adapters;

  torch::Tensor predict_eps(const torch::Tensor& z_t, const torch::Tensor& t,
                            const torch::Tensor& context) const {
    return base->predict_eps(z_t, t, context, &adapters);
  }
  torch::Tensor encode_prompt(const std::vector<std::string>& prompts) const {
    return base->encode_prompt(prompts, &adapters);
  }
};

/// Every attention projection of the denoiser, plus the conditioning encoder's when asked.
std::vector<std::string> default_lora_targets(const DiffusionBackend& backend, bool include_text_encoder);

/// A ~ N(0, 1/r) of shape [out, r], B = 0 of shape [r, in]. Throws on an unknown
/// site or rank outside (0, min(in, out)).
AdaptedDenoiser attach_lora(std::shared_ptr<DiffusionBackend> base, const std::vector<std::string>& targets,
                            int rank, double alpha, std::uint64_t seed);

using PromptBuilder = std::function<std::string(const ImageRecord&)>;

struct LoraConfig {
  int rank = 4;
  double alpha = 4.0;
  double lr = 1e-4;
  int steps = 1000;
  int batch_size = 8;
  bool include_text_encoder = true;
  /// Empty selects default_lora_targets.
  std::vector<std::string> targets;
  std::uint64_t seed = 0;
  bool flip_augment = true;

  void validate() const;
};
void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

struct LoraReport {
  std::vector<double> loss_curve;
};

/// Generation template with the concept word and the record's own skin group.
PromptBuilder default_prompt_builder(const ConceptTokens& concepts, const PromptTemplate& tmpl = {});

/// Adam over the adapter matrices only; base weights and every embedding row stay fixed.
LoraReport train_lora(AdaptedDenoiser& adapted, const DatasetManifest& train, const ConceptTokens& concepts,
                      const LoraConfig& config, const PromptBuilder& prompt_builder, ImageStore& store);

/// Attaches adapters per `config` and trains them.
AdaptedDenoiser fit_lora(std::shared_ptr<DiffusionBackend> base, const DatasetManifest& train,
                         const ConceptTokens& concepts, const LoraConfig& config,
                         const PromptBuilder& prompt_builder, ImageStore& store, LoraReport* report = nullptr);

/// Header records targets, rank, alpha, backend fingerprint and format version.
void save_adapters(const std::filesystem::path& path, const LoraSet& adapters, const DiffusionBackend& backend);
/// Refuses files written against a backend with a different fingerprint.
LoraSet load_adapters(const std::filesystem::path& path, const DiffusionBackend& backend);

}  // namespace dermaug
