#include "doctest_torch.hpp"

#include "dermaug/concept_inversion.hpp"
#include "dermaug/error.hpp"
#include "dermaug/lora.hpp"
#include "test_support.hpp"

using namespace dermaug;

namespace {

struct Probe {
  torch::Tensor z, t, ctx_base, ctx_adapted;
};

torch::Tensor base_eps(const DiffusionBackend& b, const torch::Tensor& z, const torch::Tensor& t,
                       const std::vector<std::string>& prompts) {
  torch::NoGradGuard no_grad;
  return b.predict_eps(z, t, b.encode_prompt(prompts), nullptr);
}

torch::Tensor adapted_eps(const AdaptedDenoiser& a, const torch::Tensor& z, const torch::Tensor& t,
                          const std::vector<std::string>& prompts) {
  torch::NoGradGuard no_grad;
  return a.predict_eps(z, t, a.encode_prompt(prompts));
}

std::string embeddings_digest(const DiffusionBackend& b) {
  NamedTensors rows;
  for (const auto& token : b.placeholder_tokens()) rows.emplace_back(token, b.placeholder(token));
  return group_digest(b, "embedding_table") + tensor_digest(rows);
}

LoraConfig quick(int steps) {
  LoraConfig c;
  c.steps = steps;
  c.batch_size = 4;
  c.lr = 1e-2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("attachment shapes and zero-init equivalence") {
  std::shared_ptr<DiffusionBackend> b = testing::tiny_backend(1);
  auto targets = default_lora_targets(*b, true);
  CHECK(targets.size() == b->projection_sites().size());
  CHECK(default_lora_targets(*b, false).size() == targets.size() - 4);

  auto adapted = attach_lora(b, targets, 4, 4.0, 0);
  for (const auto& site : b->projection_sites()) {
    const auto* a = adapted.adapters.find(site.id);
    REQUIRE(a != nullptr);
    CHECK(a->A.sizes() == std::vector<std::int64_t>{site.out_features, 4});
    CHECK(a->B.sizes() == std::vector<std::int64_t>{4, site.in_features});
    CHECK(a->B.abs().sum().item<double>() == 0.0);
  }

  torch::manual_seed(7);
  auto z = torch::randn({3, 4, 4, 4});
  auto t = torch::tensor({1, 500, 1000}, torch::kLong);
  const std::vector<std::string> prompts{"an image of rash", "", "an image of psoriasis on dark skin"};
  CHECK(testing::bit_equal(adapted_eps(adapted, z, t, prompts), base_eps(*b, z, t, prompts)));

  CHECK_THROWS_AS(attach_lora(b, {"unet.nowhere.q"}, 4, 4.0, 0), ValidationError);
  CHECK_THROWS_AS(attach_lora(b, {targets.front()}, 0, 4.0, 0), ValidationError);
  CHECK_THROWS_AS(attach_lora(b, {targets.front()}, 16, 4.0, 0), ValidationError);
}

TEST_CASE("rank four on a 32-wide projection") {
  ToyBackendConfig c;
  std::shared_ptr<DiffusionBackend> b = std::make_shared<ToyBackend>(c, 0);
  auto adapted = attach_lora(b, {"unet.down.cross.q"}, 4, 4.0, 0);
  const auto* a = adapted.adapters.find("unet.down.cross.q");
  REQUIRE(a != nullptr);
  CHECK(a->A.sizes() == std::vector<std::int64_t>{32, 4});
  CHECK(a->B.sizes() == std::vector<std::int64_t>{4, 32});
}

TEST_CASE("training changes only the adapters and stays low rank") {
  std::shared_ptr<DiffusionBackend> b = testing::pretrained_tiny_backend();
  ImageStore store;
  const auto train = testing::tiny_corpus().filter(SkinGroup::Light);
  auto concepts = invert_all_concepts(train, *b, InversionConfig{.steps = 1, .batch_size = 2}, store);
  const auto tokens = concept_tokens(concepts);
  const auto base_before = base_parameter_digest(*b);
  const auto emb_before = embeddings_digest(*b);

  SUBCASE("zero steps leaves the forward pass at the base") {
    LoraReport report;
    auto adapted = fit_lora(b, train, tokens, quick(0), default_prompt_builder(tokens), store, &report);
    CHECK(report.loss_curve.empty());
    auto z = torch::randn({2, 4, 4, 4});
    auto t = torch::tensor({10, 700}, torch::kLong);
    CHECK(testing::bit_equal(adapted_eps(adapted, z, t, {"", "an image of rash"}),
                             base_eps(*b, z, t, {"", "an image of rash"})));
  }

  SUBCASE("forty steps") {
    LoraReport report;
    auto adapted = fit_lora(b, train, tokens, quick(40), default_prompt_builder(tokens), store, &report);
    CHECK(report.loss_curve.size() == 40);
    CHECK(base_parameter_digest(*b) == base_before);
    CHECK(embeddings_digest(*b) == emb_before);

    double max_b = 0.0;
    for (const auto& [target, a] : adapted.adapters) {
      max_b = std::max(max_b, a.B.abs().max().item<double>());
      auto sv = torch::linalg_svdvals(a.delta().to(torch::kFloat64));
      const double s1 = sv[0].item<double>();
      for (std::int64_t i = a.rank; i < sv.size(0); ++i) CHECK(sv[i].item<double>() <= 1e-6 * s1);
    }
    CHECK(max_b > 0.0);

    auto z = torch::randn({2, 4, 4, 4});
    auto t = torch::tensor({10, 700}, torch::kLong);
    CHECK_FALSE(testing::bit_equal(adapted_eps(adapted, z, t, {"", "an image of rash"}),
                                   base_eps(*b, z, t, {"", "an image of rash"})));
    // Detaching restores the base exactly.
    AdaptedDenoiser detached{b, {}};
    CHECK(testing::bit_equal(adapted_eps(detached, z, t, {"", "an image of rash"}),
                             base_eps(*b, z, t, {"", "an image of rash"})));
  }
}

TEST_CASE("training input checks") {
  std::shared_ptr<DiffusionBackend> b = testing::tiny_backend(0);
  ImageStore store;
  ConceptTokens partial{{Condition::Psoriasis, "psoriasis"}};
  CHECK_THROWS_AS(fit_lora(b, testing::tiny_corpus(), partial, quick(1), default_prompt_builder(partial), store),
                  ValidationError);
  const auto plain = plain_concept_words();
  CHECK_THROWS_AS(fit_lora(b, DatasetManifest{}, plain, quick(1), default_prompt_builder(plain), store),
                  ValidationError);
  auto bad = quick(1);
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("default prompt builder names the concept and the record's group") {
  ConceptTokens tokens{{Condition::Psoriasis, "<cond-psoriasis>"}};
  auto build = default_prompt_builder(tokens);
  ImageRecord r{"x", "x.png", Condition::Psoriasis, Fst::V};
  CHECK(build(r) == "An image of <cond-psoriasis> on dark skin");
  r.fst = Fst::I;
  CHECK(build(r) == "An image of <cond-psoriasis> on light skin");
}

TEST_CASE("adapter files") {
  std::shared_ptr<DiffusionBackend> b = testing::tiny_backend(1);
  auto adapted = attach_lora(b, default_lora_targets(*b, true), 2, 8.0, 5);
  for (auto& [target, a] : adapted.adapters) a.B.normal_();
  const auto dir = testing::scratch_dir("adapters");
  save_adapters(dir / "a.bin", adapted.adapters, *b);
  auto back = load_adapters(dir / "a.bin", *b);
  REQUIRE(back.size() == adapted.adapters.size());
  for (const auto& [target, a] : adapted.adapters) {
    const auto* other = back.find(target);
    REQUIRE(other != nullptr);
    CHECK(other->rank == 2);
    CHECK(other->alpha == 8.0);
    CHECK(testing::bit_equal(other->A, a.A));
    CHECK(testing::bit_equal(other->B, a.B));
  }
  CHECK(lora_digest(&back) == lora_digest(&adapted.adapters));

  auto wider = testing::tiny_backend_config();
  wider.unet_width = 24;
  ToyBackend different(wider, 1);
  CHECK_THROWS_AS(load_adapters(dir / "a.bin", different), ValidationError);

  save_adapters(dir / "empty.bin", LoraSet{}, *b);
  CHECK(load_adapters(dir / "empty.bin", *b).empty());
}
