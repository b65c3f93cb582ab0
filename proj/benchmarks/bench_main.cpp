#include <benchmark/benchmark.h>

#include <torch/torch.h>

#include "dermaug/classifier.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/diffusion_loss.hpp"
#include "dermaug/hashing.hpp"
#include "dermaug/schedule.hpp"
#include "dermaug/synthesis.hpp"
#include "dermaug/toy_backend.hpp"

using namespace dermaug;

namespace {

const ToyBackend& backend() {
  static const ToyBackend b(ToyBackendConfig{}, 0);
  return b;
}

void BM_MakeSchedule(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(make_schedule(1000, 1e-4, 0.02));
}
BENCHMARK(BM_MakeSchedule);

void BM_BuildScenario(benchmark::State& state) {
  const auto m = manifest_from_counts(fitzpatrick_subset_counts(), "fz");
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(build_scenario(m, Scenario::I, seed++));
}
BENCHMARK(BM_BuildScenario);

void BM_ComputeMetrics(benchmark::State& state) {
  std::vector<Condition> truth, pred;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    truth.push_back(kAllConditions[static_cast<std::size_t>(i % 7)]);
    pred.push_back(kAllConditions[static_cast<std::size_t>((i * 3) % 7)]);
  }
  for (auto _ : state) benchmark::DoNotOptimize(compute_metrics(truth, pred));
}
BENCHMARK(BM_ComputeMetrics)->Arg(56)->Arg(291);

void BM_Sha256(benchmark::State& state) {
  const std::string data(static_cast<std::size_t>(state.range(0)), 'x');
  for (auto _ : state) benchmark::DoNotOptimize(sha256_hex(data));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sha256)->Arg(1 << 10)->Arg(1 << 20);

void BM_PredictEps(benchmark::State& state) {
  torch::set_num_threads(1);
  torch::NoGradGuard no_grad;
  const auto& b = backend();
  const auto& g = b.geometry();
  auto z = torch::randn({state.range(0), g.latent_channels, g.latent_size, g.latent_size});
  auto t = torch::full({state.range(0)}, 500, torch::kLong);
  auto ctx = b.encode_prompt(std::vector<std::string>(static_cast<std::size_t>(state.range(0)), "an image of rash"));
  for (auto _ : state) benchmark::DoNotOptimize(b.predict_eps(z, t, ctx, nullptr));
}
BENCHMARK(BM_PredictEps)->Arg(1)->Arg(32);

void BM_LdmLoss(benchmark::State& state) {
  torch::set_num_threads(1);
  const auto& b = backend();
  const auto& g = b.geometry();
  auto z = torch::randn({8, g.latent_channels, g.latent_size, g.latent_size});
  const std::vector<std::string> prompts(8, "an image of psoriasis on dark skin");
  auto gen = make_generator(0);
  for (auto _ : state) {
    torch::NoGradGuard no_grad;
    benchmark::DoNotOptimize(ldm_loss_latents(z, prompts, b, nullptr, gen));
  }
}
BENCHMARK(BM_LdmLoss);

void BM_Img2Img(benchmark::State& state) {
  torch::set_num_threads(1);
  const auto& b = backend();
  const auto size = b.geometry().image_size;
  auto refs = torch::rand({8, 3, size, size});
  const std::vector<std::string> prompts(8, "an image of rash on dark skin");
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7};
  GenerationConfig gc;
  gc.inference_steps = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(img2img(b, refs, prompts, seeds, 0.5, gc));
}
BENCHMARK(BM_Img2Img)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
