#include "dermaug/diffusion_loss.hpp"

#include <algorithm>
#include <numeric>

#include "dermaug/error.hpp"

namespace dermaug {

at::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

torch::Tensor denoising_loss(const torch::Tensor& z0, const torch::Tensor& context,
                             const EpsPredictor& predictor, const NoiseSchedule& schedule,
                             at::Generator& generator) {
  if (z0.dim() < 1 || z0.size(0) == 0) throw ValidationError("denoising loss: empty batch");
  const auto b = z0.size(0);
  auto t = torch::randint(1, schedule.steps + 1, {b}, generator, torch::kLong);
  auto eps = torch::randn(z0.sizes(), generator, z0.options());
  auto z_t = forward_diffuse(z0, t, eps, schedule);
  auto eps_hat = predictor(z_t, t, context);
  return (eps - eps_hat).pow(2).flatten(1).sum(1).mean();
}

torch::Tensor ldm_loss_latents(const torch::Tensor& z0, const std::vector<std::string>& prompts,
                               const DiffusionBackend& backend, const LoraSet* lora,
                               at::Generator& generator) {
  if (prompts.empty() || z0.size(0) == 0) throw ValidationError("ldm loss: empty batch");
  if (static_cast<std::int64_t>(prompts.size()) != z0.size(0)) {
    throw ValidationError("ldm loss: one prompt per latent required");
  }
  auto context = backend.encode_prompt(prompts, lora);
  return denoising_loss(
      z0, context,
      [&](const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor& c) {
        return backend.predict_eps(zt, t, c, lora);
      },
      backend.schedule(), generator);
}

torch::Tensor ldm_loss(const torch::Tensor& images, const std::vector<std::string>& prompts,
                       const DiffusionBackend& backend, const LoraSet* lora, at::Generator& generator) {
  if (images.dim() != 4 || images.size(0) == 0) throw ValidationError("ldm loss: empty batch");
  torch::Tensor z0;
  {
    torch::NoGradGuard no_grad;
    z0 = backend.encode(images);
  }
  return ldm_loss_latents(z0, prompts, backend, lora, generator);
}

CurveSummary summarize_curve(const std::vector<double>& curve, double fraction) {
  if (curve.empty()) return {};
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(curve.size() * fraction));
  const double start = std::accumulate(curve.begin(), curve.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / n;
  const double end = std::accumulate(curve.end() - static_cast<std::ptrdiff_t>(n), curve.end(), 0.0) / n;
  return {start, end};
}

}  // namespace dermaug
