#pragma once

#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dermaug/backend.hpp"

namespace dermaug {

/// (z_t, t, context) -> predicted noise, same shape as z_t.
using EpsPredictor =
    std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

/// Batch mean of || eps - eps_hat(z_t, t, c) ||^2 with t ~ U{1..T} and eps ~ N(0, I)
/// drawn from `generator`; the squared norm sums over all latent elements.
torch::Tensor denoising_loss(const torch::Tensor& z0, const torch::Tensor& context,
                             const EpsPredictor& predictor, const NoiseSchedule& schedule,
                             at::Generator& generator);

/// Conditional latent diffusion loss on pre-encoded latents and prompts.
torch::Tensor ldm_loss_latents(const torch::Tensor& z0, const std::vector<std::string>& prompts,
                               const DiffusionBackend& backend, const LoraSet* lora,
                               at::Generator& generator);

/// Encodes images (no gradient through the frozen codec) then applies the loss.
torch::Tensor ldm_loss(const torch::Tensor& images, const std::vector<std::string>& prompts,
                       const DiffusionBackend& backend, const LoraSet* lora, at::Generator& generator);

at::Generator make_generator(std::uint64_t seed);

/// Mean of the first and last `fraction` of a loss curve.
struct CurveSummary {
  double start = 0.0;
  double end = 0.0;
};
CurveSummary summarize_curve(const std::vector<double>& curve, double fraction = 0.1);

}  // namespace dermaug
