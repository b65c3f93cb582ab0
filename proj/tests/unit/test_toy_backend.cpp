#include "doctest_torch.hpp"

#include <set>

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "dermaug/tensor_archive.hpp"
#include "dermaug/toy_backend.hpp"
#include "dermaug/toyderm.hpp"
#include "test_support.hpp"

using namespace dermaug;
namespace fs = std::filesystem;

namespace {

NamedTensors without_normalization(const ParameterGroup& g) {
  NamedTensors out;
  for (const auto& [name, t] : g.tensors) {
    if (name.rfind("latent_", 0) != 0) out.emplace_back(name, t);
  }
  return out;
}

}  // namespace

TEST_CASE("default geometry") {
  ToyBackend b(ToyBackendConfig{}, 0);
  const auto& g = b.geometry();
  CHECK(g.image_size == 64);
  CHECK(g.latent_channels == 4);
  CHECK(g.latent_size == 8);
  CHECK(g.spatial_factor() == 8);
  std::size_t cross = 0;
  std::set<std::string> blocks;
  for (const auto& s : b.projection_sites()) {
    if (s.component == "denoiser" && s.id.find(".cross.") != std::string::npos) {
      ++cross;
      blocks.insert(s.id.substr(0, s.id.find(".cross.")));
    }
  }
  CHECK(blocks.size() >= 2);
  CHECK(cross == 4 * blocks.size());

  auto x = torch::rand({2, 3, 64, 64});
  torch::NoGradGuard no_grad;
  auto z = b.encode(x);
  CHECK(z.sizes() == std::vector<std::int64_t>{2, 4, 8, 8});
  CHECK(b.decode(z).sizes() == x.sizes());
  auto ctx = b.encode_prompt({"an image of rash", ""});
  CHECK(ctx.sizes() == std::vector<std::int64_t>{2, g.context_len, g.context_dim});
  auto eps = b.predict_eps(z, torch::tensor({1, 1000}, torch::kLong), ctx);
  CHECK(eps.sizes() == z.sizes());
}

TEST_CASE("prompt encoding") {
  auto b = testing::tiny_backend(2);
  torch::NoGradGuard no_grad;
  auto a = b->encode_prompt({"an image of psoriasis on dark skin"});
  CHECK(testing::bit_equal(a, b->encode_prompt({"an image of psoriasis on dark skin"})));
  CHECK_THROWS_AS(b->encode_prompt({"an image of zebra"}), ValidationError);

  SUBCASE("empty prompt is the sentinel sequence") {
    const auto& text = b->conditioning();
    auto ids = text->token_ids("");
    const auto& v = text->vocabulary();
    REQUIRE(ids.size() == 16);
    CHECK(ids[0] == *v.id(Vocabulary::kBos));
    CHECK(ids[1] == *v.id(Vocabulary::kEos));
    for (std::size_t i = 2; i < ids.size(); ++i) CHECK(ids[i] == *v.id(Vocabulary::kPad));
  }

  SUBCASE("placeholder rows are local") {
    auto row = b->register_placeholder("<cond-x>", "rash");
    auto with = b->encode_prompt({"an image of <cond-x>"});
    CHECK(testing::bit_equal(with, b->encode_prompt({"an image of rash"})));
    row.add_(1.0);
    CHECK_FALSE(testing::bit_equal(b->encode_prompt({"an image of <cond-x>"}), with));
    CHECK(testing::bit_equal(b->encode_prompt({"an image of psoriasis on dark skin"}), a));
    CHECK_THROWS_AS(b->register_placeholder("<cond-x>", "rash"), ValidationError);
    CHECK_THROWS_AS(b->register_placeholder("<cond-y>", "zebra"), ValidationError);
  }
}

TEST_CASE("checkpoint round trip and version check") {
  auto b = testing::tiny_backend(3);
  b->register_placeholder("<cond-x>", "rash").add_(0.5);
  b->set_codec_tolerance(0.125);
  const auto dir = testing::scratch_dir("checkpoint");
  b->save(dir / "b.bin");
  auto back = ToyBackend::load(dir / "b.bin");
  CHECK(back->fingerprint() == b->fingerprint());
  CHECK(back->codec_tolerance() == 0.125);
  CHECK(back->placeholder_tokens() == std::vector<std::string>{"<cond-x>"});

  torch::NoGradGuard no_grad;
  auto z = torch::randn({2, 4, 4, 4});
  auto t = torch::tensor({10, 900}, torch::kLong);
  auto ctx = b->encode_prompt({"an image of rash", ""});
  CHECK(testing::bit_equal(back->encode_prompt({"an image of rash", ""}), ctx));
  CHECK(testing::bit_equal(back->predict_eps(z, t, ctx), b->predict_eps(z, t, ctx)));

  auto a = read_archive(dir / "b.bin", ToyBackend::kArchiveKind, ToyBackend::kFormatVersion);
  a.format_version = 99;
  write_archive(dir / "future.bin", a);
  CHECK_THROWS_AS(ToyBackend::load(dir / "future.bin"), ValidationError);

  auto copy = b->clone();
  copy->register_placeholder("<cond-z>", "rash");
  CHECK_FALSE(b->knows_token("<cond-z>"));
  CHECK(copy->fingerprint() == b->fingerprint());
}

TEST_CASE("pretraining with zero steps keeps the initialization") {
  auto config = testing::tiny_pretrain_config();
  config.codec_steps = 0;
  config.denoiser_steps = 0;
  ImageStore store;
  auto trained = train_toy_backend(testing::tiny_corpus(), store, config);
  ToyBackend init(config.backend, derive_seed(config.seed, "toy-init"));
  auto tg = trained->parameter_groups(), ig = init.parameter_groups();
  REQUIRE(tg.size() == ig.size());
  for (std::size_t i = 0; i < tg.size(); ++i) {
    CHECK(tensor_digest(without_normalization(tg[i])) == tensor_digest(without_normalization(ig[i])));
  }
}

TEST_CASE("short pretraining lowers the loss, is deterministic and freezes") {
  ToyDermConfig corpus;
  corpus.per_class_light = 20;
  corpus.per_class_dark = 20;
  corpus.image_size = 32;
  corpus.seed = 8;
  auto m = generate_toyderm(corpus, testing::scratch_dir("pretrain-280"));
  REQUIRE(m.size() == 280);

  ImageStore store;
  PretrainReport r1, r2;
  auto a = train_toy_backend(m, store, testing::tiny_pretrain_config(), &r1);
  auto b = train_toy_backend(m, store, testing::tiny_pretrain_config(), &r2);
  CHECK(a->fingerprint() == b->fingerprint());
  CHECK(r1.denoiser_curve == r2.denoiser_curve);

  auto codec = summarize_curve(r1.codec_curve), den = summarize_curve(r1.denoiser_curve);
  MESSAGE("codec " << codec.start << " -> " << codec.end << ", denoiser " << den.start << " -> " << den.end);
  CHECK(codec.end < codec.start);
  CHECK(den.end < den.start);
  CHECK(r1.train_images + r1.holdout_images == 280);
  CHECK(a->codec_tolerance() == doctest::Approx(r1.codec_tolerance));
  CHECK(r1.codec_tolerance >= r1.holdout_rmse_max);

  for (const auto& g : a->parameter_groups()) {
    for (const auto& [name, t] : g.tensors) CHECK_FALSE(t.requires_grad());
  }

  std::vector<fs::path> paths;
  for (const auto& rec : m.records) paths.push_back(rec.image_path);
  auto rmse = reconstruction_rmse(*a, store.load_batch(paths, 32));
  CHECK(rmse.max().item<double>() < 0.5);
}

TEST_CASE("pretraining rejects an empty corpus") {
  ImageStore store;
  CHECK_THROWS_AS(train_toy_backend(DatasetManifest{}, store, testing::tiny_pretrain_config()), ValidationError);
  auto bad = testing::tiny_pretrain_config();
  bad.codec_steps = -1;
  CHECK_THROWS_AS(train_toy_backend(testing::tiny_corpus(), store, bad), ValidationError);
}
