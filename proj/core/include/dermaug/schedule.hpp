#pragma once

#include <vector>

#include <torch/torch.h>

namespace dermaug {

enum class ScheduleKind { Linear };

/// DDPM variance schedule over times t = 1..T. Index t-1 of each vector holds
/// the value for time t; `alpha_bar(0)` is 1 by convention (clean signal).
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int t) const;
  /// alpha_bar gathered at integer times, as float32 [B].
  torch::Tensor alpha_bar_at(const torch::Tensor& t) const;
};

/// Linear betas from beta_min (t = 1) to beta_max (t = T).
NoiseSchedule make_schedule(int steps, double beta_min, double beta_max,
                            ScheduleKind kind = ScheduleKind::Linear);

/// z_t = sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps.
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& eps, double alpha_bar);

/// Same, with alpha_bar taken from `schedule` at time t in [1, T].
torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

/// Batched form: z0 and eps are [B, ...], t is int64 [B].
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule);

}  // namespace dermaug
