#include "test_support.hpp"

#include <cstdlib>
#include <cstring>
#include <map>

#include "dermaug/toyderm.hpp"

namespace dermaug::testing {

std::filesystem::path scratch_dir(const std::string& name) {
  const char* env = std::getenv("DERMAUG_TEST_TMP");
  const auto root = env ? std::filesystem::path(env) : std::filesystem::temp_directory_path() / "dermaug-tests";
  const auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ToyBackendConfig tiny_backend_config() {
  ToyBackendConfig c;
  c.image_size = 32;
  c.latent_size = 4;
  c.codec_width = 16;
  c.unet_width = 16;
  c.unet_mid_width = 32;
  c.attention_heads = 2;
  c.text_dim = 16;
  c.text_heads = 2;
  return c;
}

std::shared_ptr<ToyBackend> tiny_backend(std::uint64_t seed) {
  return std::make_shared<ToyBackend>(tiny_backend_config(), seed);
}

PretrainConfig tiny_pretrain_config() {
  PretrainConfig c;
  c.backend = tiny_backend_config();
  c.codec_steps = 40;
  c.codec_batch = 16;
  c.codec_crop = 0;
  c.denoiser_steps = 120;
  c.denoiser_batch = 16;
  c.seed = 4;
  return c;
}

std::shared_ptr<ToyBackend> pretrained_tiny_backend() {
  static std::unique_ptr<ToyBackend> prototype = [] {
    ImageStore store;
    return train_toy_backend(tiny_corpus(), store, tiny_pretrain_config());
  }();
  return std::shared_ptr<ToyBackend>(prototype->clone());
}

const DatasetManifest& tiny_corpus(int per_class_light, int per_class_dark) {
  static std::map<std::pair<int, int>, DatasetManifest> cache;
  auto key = std::make_pair(per_class_light, per_class_dark);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  ToyDermConfig c;
  c.per_class_light = per_class_light;
  c.per_class_dark = per_class_dark;
  c.image_size = 32;
  c.seed = 5;
  const auto dir = scratch_dir("corpus-" + std::to_string(per_class_light) + "-" + std::to_string(per_class_dark));
  return cache.emplace(key, generate_toyderm(c, dir)).first->second;
}

bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes() || a.scalar_type() != b.scalar_type()) return false;
  auto ca = a.contiguous(), cb = b.contiguous();
  return std::memcmp(ca.data_ptr(), cb.data_ptr(), ca.numel() * ca.element_size()) == 0;
}

}  // namespace dermaug::testing
