#include "dermaug/hashing.hpp"

#include <array>
#include <cstring>
#include <stdexcept>

#include <openssl/evp.h>

namespace dermaug {

struct Sha256::Context {
  EVP_MD_CTX* md = nullptr;
};

Sha256::Sha256() : ctx_(std::make_unique<Context>()) {
  ctx_->md = EVP_MD_CTX_new();
  if (ctx_->md == nullptr || EVP_DigestInit_ex(ctx_->md, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: EVP initialisation failed");
  }
}

Sha256::~Sha256() {
  if (ctx_ && ctx_->md != nullptr) EVP_MD_CTX_free(ctx_->md);
}

Sha256& Sha256::update(const void* data, std::size_t size) {
  if (size > 0 && EVP_DigestUpdate(ctx_->md, data, size) != 1) {
    throw std::runtime_error("sha256: update failed");
  }
  return *this;
}

std::string Sha256::hex_digest() {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx_->md, digest.data(), &len) != 1) {
    throw std::runtime_error("sha256: finalisation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data);
  return h.hex_digest();
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
  const std::string hex = sha256_hex(std::to_string(master) + "|" + std::string(tag) + "|" +
                                     std::to_string(index));
  return std::stoull(hex.substr(0, 15), nullptr, 16);
}

std::string tensor_digest(const NamedTensors& tensors) {
  Sha256 h;
  for (const auto& [name, tensor] : tensors) {
    h.update(name);
    const auto t = tensor.detach().contiguous().cpu();
    for (auto d : t.sizes()) h.update(&d, sizeof(d));
    h.update(t.data_ptr(), t.numel() * t.element_size());
  }
  return h.hex_digest();
}

}  // namespace dermaug
