#pragma once

#include <string>

#include <torch/torch.h>

#include "dermaug/lora_types.hpp"

namespace dermaug {

/// Linear projection that can take a low-rank update at forward time.
///
/// The adapter is looked up by `site()` in the LoraSet passed to forward, so a
/// frozen base network can be evaluated with or without adapters concurrently.
class ProjectionImpl : public torch::nn::Module {
 public:
  ProjectionImpl(std::string site, std::int64_t in_features, std::int64_t out_features,
                 bool bias = true);

  torch::Tensor forward(const torch::Tensor& x, const LoraSet* lora = nullptr) const;

  const std::string& site() const { return site_; }
  std::int64_t in_features() const { return in_features_; }
  std::int64_t out_features() const { return out_features_; }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  std::string site_;
  std::int64_t in_features_;
  std::int64_t out_features_;
};
TORCH_MODULE(Projection);

/// Multi-head attention; self-attention when `context` is undefined.
class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(const std::string& prefix, std::int64_t dim, std::int64_t context_dim,
                std::int64_t heads);

  /// x [B, N, dim], context [B, M, context_dim] -> [B, N, dim].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context,
                        const LoraSet* lora) const;

  Projection q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};

 private:
  std::int64_t heads_;
};
TORCH_MODULE(Attention);

/// Sinusoidal embedding of (float) timesteps [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

}  // namespace dermaug
