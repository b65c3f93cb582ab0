#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "dermaug/hashing.hpp"
#include "dermaug/lora_types.hpp"
#include "dermaug/schedule.hpp"

namespace dermaug {

struct BackendGeometry {
  std::int64_t image_channels = 3;
  std::int64_t image_size = 64;
  std::int64_t latent_channels = 4;
  std::int64_t latent_size = 8;
  std::int64_t context_len = 16;
  std::int64_t context_dim = 32;

  std::int64_t latent_numel() const { return latent_channels * latent_size * latent_size; }
  std::int64_t spatial_factor() const { return image_size / latent_size; }
  bool operator==(const BackendGeometry&) const = default;
};

/// A linear projection inside an attention block that can host a LoRA adapter.
struct ProjectionSite {
  std::string id;
  std::string component;  // "denoiser" or "text_encoder"
  std::int64_t in_features = 0;
  std::int64_t out_features = 0;
  torch::Tensor weight;  // frozen base weight [out, in]
};

struct ParameterGroup {
  std::string name;
  NamedTensors tensors;
};

/// Everything downstream of pretraining talks to a latent diffusion model
/// through this interface: inversion, LoRA, synthesis and the experiment runner
/// run unchanged against the built-in toy model or an external checkpoint.
///
/// Images are float [B, 3, H, W] in [0, 1]; latents are [B, c, h, w].
class DiffusionBackend {
 public:
  virtual ~DiffusionBackend() = default;

  virtual const BackendGeometry& geometry() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;

  virtual torch::Tensor encode(const torch::Tensor& images) const = 0;
  virtual torch::Tensor decode(const torch::Tensor& latents) const = 0;
  /// Conditioning [B, context_len, context_dim]; differentiable in placeholder rows.
  virtual torch::Tensor encode_prompt(const std::vector<std::string>& prompts,
                                      const LoraSet* lora = nullptr) const = 0;
  /// Noise prediction with the shape of z_t; t is int64 [B] in [1, T].
  virtual torch::Tensor predict_eps(const torch::Tensor& z_t, const torch::Tensor& t,
                                    const torch::Tensor& context,
                                    const LoraSet* lora = nullptr) const = 0;
  /// Named parameter groups: "codec", "text_encoder", "denoiser" (frozen base)
  /// and "placeholders" (learned concept rows).
  virtual std::vector<ParameterGroup> parameter_groups() const = 0;

  virtual std::vector<ProjectionSite> projection_sites() const = 0;

  virtual torch::Tensor register_placeholder(const std::string& token, const std::string& init_word) = 0;
  virtual torch::Tensor placeholder(const std::string& token) const = 0;
  virtual std::vector<std::string> placeholder_tokens() const = 0;
  virtual bool knows_token(const std::string& token) const = 0;

  /// Per-image RMSE bound on D(E(x)) vs x for in-distribution images.
  virtual double codec_tolerance() const = 0;

  /// Identifies geometry and base weights; placeholders and adapters excluded.
  virtual std::string fingerprint() const;
};

/// Digest of every base parameter group (everything except "placeholders").
std::string base_parameter_digest(const DiffusionBackend& backend);

/// Digest of one named group; empty digest input when the group is absent.
std::string group_digest(const DiffusionBackend& backend, const std::string& group);

}  // namespace dermaug
