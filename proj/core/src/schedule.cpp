#include "dermaug/schedule.hpp"

#include <cmath>
#include <string>

#include "dermaug/error.hpp"

namespace dermaug {

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 1 || t > steps) {
    throw ValidationError("schedule time " + std::to_string(t) + " outside [0, " +
                          std::to_string(steps) + "]");
  }
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

torch::Tensor NoiseSchedule::alpha_bar_at(const torch::Tensor& t) const {
  auto table = torch::empty({steps + 1}, torch::kFloat64);
  auto* p = table.data_ptr<double>();
  p[0] = 1.0;
  for (int i = 0; i < steps; ++i) p[i + 1] = alpha_bars[static_cast<std::size_t>(i)];
  const auto idx = t.to(torch::kLong).cpu();
  if (idx.numel() > 0 && (idx.min().item<std::int64_t>() < 0 || idx.max().item<std::int64_t>() > steps)) {
    throw ValidationError("schedule time outside [0, " + std::to_string(steps) + "]");
  }
  return table.index_select(0, idx.reshape({-1})).to(torch::kFloat32);
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max, ScheduleKind kind) {
  if (steps < 1) throw ValidationError("schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ValidationError("schedule: require 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alphas.resize(s.betas.size());
  s.alpha_bars.resize(s.betas.size());
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    double beta = beta_min;
    if (kind == ScheduleKind::Linear && steps > 1) {
      beta = beta_min + (beta_max - beta_min) * static_cast<double>(i) / (steps - 1);
    }
    s.betas[i] = beta;
    s.alphas[i] = 1.0 - beta;
    running *= s.alphas[i];
    s.alpha_bars[i] = running;
  }
  return s;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& eps, double alpha_bar) {
  if (!z0.sizes().equals(eps.sizes())) throw ValidationError("forward_diffuse: eps shape != z0 shape");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw ValidationError("forward_diffuse: alpha_bar outside [0,1]");
  return std::sqrt(alpha_bar) * z0 + std::sqrt(1.0 - alpha_bar) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps) {
    throw ValidationError("forward_diffuse: t=" + std::to_string(t) + " outside [1, " +
                          std::to_string(schedule.steps) + "]");
  }
  return forward_diffuse(z0, eps, schedule.alpha_bar(t));
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule) {
  if (!z0.sizes().equals(eps.sizes())) throw ValidationError("forward_diffuse: eps shape != z0 shape");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ValidationError("forward_diffuse: t must be [B]");
  std::vector<std::int64_t> bshape(static_cast<std::size_t>(z0.dim()), 1);
  bshape[0] = z0.size(0);
  const auto ab = schedule.alpha_bar_at(t).to(z0.scalar_type()).reshape(bshape);
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

}  // namespace dermaug
