#include "doctest_torch.hpp"

#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dermaug/concept_inversion.hpp"
#include "dermaug/diffusion_loss.hpp"
#include "dermaug/lora.hpp"
#include "dermaug/toy_backend.hpp"
#include "dermaug/toyderm.hpp"
#include "test_support.hpp"

using namespace dermaug;
namespace fs = std::filesystem;

namespace {

fs::path fixture_dir() {
  const char* env = std::getenv("DERMAUG_FIXTURE_BACKEND_DIR");
  REQUIRE(env != nullptr);
  return env;
}

std::shared_ptr<ToyBackend> fixture_backend() { return ToyBackend::load(fixture_dir() / "backend.bin"); }

const DatasetManifest& study_corpus() {
  static const DatasetManifest m = [] {
    ToyDermConfig c;
    c.per_class_light = 24;
    c.per_class_dark = 16;
    c.seed = 1;
    return generate_toyderm(c, testing::scratch_dir("study"), "study");
  }();
  return m;
}

/// Diffusion loss averaged over `repeats` fixed (t, eps) draws.
double fixed_draw_loss(const torch::Tensor& latents, const std::vector<std::string>& prompts,
                       const DiffusionBackend& b, const LoraSet* lora, int repeats = 16) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(12345);
  double total = 0.0;
  for (int i = 0; i < repeats; ++i) total += ldm_loss_latents(latents, prompts, b, lora, gen).item<double>();
  return total / repeats;
}

torch::Tensor encode_all(const DatasetManifest& m, const DiffusionBackend& b) {
  ImageStore store;
  std::vector<fs::path> paths;
  for (const auto& r : m.records) paths.push_back(r.image_path);
  torch::NoGradGuard no_grad;
  return b.encode(store.load_batch(paths, static_cast<int>(b.geometry().image_size)));
}

}  // namespace

TEST_CASE("pretraining curves decrease") {
  std::ifstream in(fixture_dir() / "pretrain.json");
  REQUIRE(in);
  const auto doc = nlohmann::json::parse(in);
  for (const char* key : {"codec_curve", "denoiser_curve"}) {
    const auto curve = doc.at(key).get<std::vector<double>>();
    REQUIRE(curve.size() >= 100);
    const auto s = summarize_curve(curve);
    MESSAGE(key << " " << s.start << " -> " << s.end);
    CHECK(s.end < s.start);
  }
  CHECK(doc.at("holdout_rmse_max").get<double>() <= doc.at("codec_tolerance").get<double>());
}

TEST_CASE("inversion lowers the loss of its concept") {
  auto b = fixture_backend();
  ImageStore store;
  const auto images = study_corpus().filter(Condition::Psoriasis).filter(SkinGroup::Light);
  DatasetManifest twenty;
  twenty.records.assign(images.records.begin(), images.records.begin() + 20);
  auto e = register_concept(*b, "<cond-psoriasis>", "rash", Condition::Psoriasis);
  const auto latents = encode_all(twenty, *b);
  const std::vector<std::string> prompts(twenty.size(), "An image of <cond-psoriasis>");
  const double before = fixed_draw_loss(latents, prompts, *b, nullptr);
  InversionConfig ic;
  ic.steps = 200;
  ic.seed = 4;
  auto trained = train_textual_inversion(twenty, e, *b, ic, store);
  CHECK(testing::bit_equal(b->placeholder(trained.token), trained.vector));
  const double after = fixed_draw_loss(latents, prompts, *b, nullptr);
  MESSAGE("fixed-draw loss " << before << " -> " << after);
  CHECK(after < before);
}

TEST_CASE("lora lowers the loss on the scenario iii training set") {
  std::shared_ptr<DiffusionBackend> b = fixture_backend();
  ImageStore store;
  const auto split = build_scenario(study_corpus(), Scenario::III, 0);
  const auto tokens = plain_concept_words();
  const auto build = default_prompt_builder(tokens);
  std::vector<std::string> prompts;
  for (const auto& r : split.train.records) prompts.push_back(build(r));
  const auto latents = encode_all(split.train, *b);
  const double before = fixed_draw_loss(latents, prompts, *b, nullptr, 4);
  LoraConfig lc;
  lc.steps = 500;
  lc.lr = 1e-3;
  lc.seed = 4;
  auto adapted = fit_lora(b, split.train, tokens, lc, build, store);
  const double after = fixed_draw_loss(latents, prompts, *b, &adapted.adapters, 4);
  MESSAGE("fixed-draw loss " << before << " -> " << after);
  CHECK(after < before);
}
