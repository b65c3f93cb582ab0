#pragma once

#include <map>
#include <string>
#include <string_view>

#include <torch/torch.h>

#include "dermaug/hashing.hpp"

namespace dermaug {

/// Low-rank update for one projection W [out, in]: delta = (alpha / rank) * A * B
/// with A [out, rank] and B [rank, in]. For the square attention projections
/// this is A in R^{n x r}, B in R^{r x n}.
struct LoraAdapter {
  std::string target;
  torch::Tensor A;
  torch::Tensor B;
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  /// Explicit delta matrix [out, in].
  torch::Tensor delta() const { return scale() * torch::matmul(A, B); }
  /// Applies the update to activations x [..., in] -> [..., out].
  torch::Tensor apply(const torch::Tensor& x) const {
    return scale() * torch::matmul(torch::matmul(x, B.t()), A.t());
  }
};

/// Adapters keyed by projection site id.
class LoraSet {
 public:
  const LoraAdapter* find(std::string_view target) const {
    auto it = adapters_.find(std::string(target));
    return it == adapters_.end() ? nullptr : &it->second;
  }
  LoraAdapter& insert(LoraAdapter adapter) {
    auto key = adapter.target;
    return adapters_.insert_or_assign(std::move(key), std::move(adapter)).first->second;
  }
  bool empty() const { return adapters_.empty(); }
  std::size_t size() const { return adapters_.size(); }
  auto begin() const { return adapters_.begin(); }
  auto end() const { return adapters_.end(); }
  auto begin() { return adapters_.begin(); }
  auto end() { return adapters_.end(); }

 private:
  std::map<std::string, LoraAdapter> adapters_;
};

/// Digest of every adapter's target, rank, alpha and matrices; "none" for null.
inline std::string lora_digest(const LoraSet* lora) {
  if (lora == nullptr) return "none";
  NamedTensors tensors;
  std::string header;
  for (const auto& [target, a] : *lora) {
    header += target + ":" + std::to_string(a.rank) + ":" + std::to_string(a.alpha) + ";";
    tensors.emplace_back(target + ".A", a.A);
    tensors.emplace_back(target + ".B", a.B);
  }
  return sha256_hex(header + tensor_digest(tensors));
}

}  // namespace dermaug
