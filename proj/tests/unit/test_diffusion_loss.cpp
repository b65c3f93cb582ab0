#include "doctest_torch.hpp"

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "test_support.hpp"

using namespace dermaug;

namespace {

const NoiseSchedule& schedule() {
  static const auto s = make_schedule(1000, 1e-4, 0.02);
  return s;
}

/// Ten parameters: a per-element gain on z_t (5) and a per-element slope in t/T (5).
torch::Tensor tiny_denoiser(const torch::Tensor& params, const torch::Tensor& z_t, const torch::Tensor& t) {
  auto gain = params.narrow(0, 0, 5);
  auto slope = params.narrow(0, 5, 5);
  auto tt = (t.to(torch::kFloat64) / 1000.0).unsqueeze(1);
  return gain * z_t + slope * tt;
}

double tiny_loss(const torch::Tensor& params, const torch::Tensor& z0) {
  auto gen = make_generator(9);
  auto loss = denoising_loss(
      z0, {}, [&](const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor&) {
        return tiny_denoiser(params, zt, t);
      },
      schedule(), gen);
  return loss.item<double>();
}

}  // namespace

TEST_CASE("a predictor that returns the true noise has zero loss") {
  auto z0 = torch::randn({6, 4, 4, 4});
  auto gen = make_generator(3);
  // Replays the loss's own draws: t first, then eps.
  auto replay = gen.clone();
  const auto b = z0.size(0);
  auto loss = denoising_loss(
      z0, {}, [&](const torch::Tensor&, const torch::Tensor&, const torch::Tensor&) {
        torch::randint(1, 1001, {b}, replay, torch::kLong);
        return torch::randn(z0.sizes(), replay, z0.options());
      },
      schedule(), gen);
  CHECK(loss.item<double>() == 0.0);
}

TEST_CASE("an all-zeros predictor scores the latent dimensionality") {
  auto z0 = torch::randn({1000, 4, 8, 8});
  auto gen = make_generator(11);
  auto loss = denoising_loss(
      z0, {}, [](const torch::Tensor& zt, const torch::Tensor&, const torch::Tensor&) { return torch::zeros_like(zt); },
      schedule(), gen);
  MESSAGE("zero-predictor loss " << loss.item<double>() << " for dim 256");
  CHECK(loss.item<double>() == doctest::Approx(256.0).epsilon(0.05));
}

TEST_CASE("analytic gradient matches central finite differences") {
  auto gen = make_generator(5);
  auto z0 = torch::randn({32, 5}, gen, torch::kFloat64);
  auto params = (0.1 * torch::randn({10}, gen, torch::kFloat64)).requires_grad_(true);

  auto g0 = make_generator(9);
  auto loss = denoising_loss(
      z0, {}, [&](const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor&) {
        return tiny_denoiser(params, zt, t);
      },
      schedule(), g0);
  loss.backward();
  auto analytic = params.grad().clone();

  const double h = 1e-6;
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    auto plus = params.detach().clone(), minus = params.detach().clone();
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (tiny_loss(plus, z0) - tiny_loss(minus, z0)) / (2 * h);
    const double a = analytic[i].item<double>();
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(numeric), 1e-8));
  }
  MESSAGE("max relative gradient error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("loss through a backend, including the unconditional sentinel") {
  auto backend = testing::tiny_backend(1);
  auto images = torch::rand({3, 3, 32, 32});
  auto gen = make_generator(2);

  auto row = backend->register_placeholder("<cond-test>", "rash");
  row.requires_grad_(true);
  auto loss = ldm_loss(images, {"an image of <cond-test>", "", "an image of rash"}, *backend, nullptr, gen);
  CHECK(std::isfinite(loss.item<double>()));
  loss.backward();
  REQUIRE(row.grad().defined());
  CHECK(row.grad().abs().sum().item<double>() > 0.0);

  auto unconditional = ldm_loss(images, {"", "", ""}, *backend, nullptr, gen);
  CHECK(std::isfinite(unconditional.item<double>()));
  CHECK(unconditional.requires_grad());

  CHECK_THROWS_AS(ldm_loss(torch::rand({0, 3, 32, 32}), {}, *backend, nullptr, gen), ValidationError);
  CHECK_THROWS_AS(ldm_loss(images, {"a", "b"}, *backend, nullptr, gen), ValidationError);
}

TEST_CASE("curve summary") {
  std::vector<double> curve(100);
  for (int i = 0; i < 100; ++i) curve[static_cast<std::size_t>(i)] = 100.0 - i;
  auto s = summarize_curve(curve);
  CHECK(s.start == doctest::Approx(95.5));
  CHECK(s.end == doctest::Approx(5.5));
}
