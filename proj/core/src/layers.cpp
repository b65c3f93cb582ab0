#include "dermaug/layers.hpp"

#include <cmath>

namespace dermaug {

ProjectionImpl::ProjectionImpl(std::string site, std::int64_t in_features,
                               std::int64_t out_features, bool bias_enabled)
    : site_(std::move(site)), in_features_(in_features), out_features_(out_features) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = register_parameter("weight", torch::empty({out_features, in_features}).uniform_(-bound, bound));
  if (bias_enabled) {
    bias = register_parameter("bias", torch::empty({out_features}).uniform_(-bound, bound));
  }
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor& x, const LoraSet* lora) const {
  auto y = torch::nn::functional::linear(x, weight, bias);
  if (lora != nullptr) {
    if (const auto* adapter = lora->find(site_)) y = y + adapter->apply(x);
  }
  return y;
}

AttentionImpl::AttentionImpl(const std::string& prefix, std::int64_t dim, std::int64_t context_dim,
                             std::int64_t heads)
    : heads_(heads) {
  TORCH_CHECK(dim % heads == 0, "attention width must be divisible by heads");
  q = register_module("q", Projection(prefix + ".q", dim, dim, false));
  k = register_module("k", Projection(prefix + ".k", context_dim, dim, false));
  v = register_module("v", Projection(prefix + ".v", context_dim, dim, false));
  o = register_module("o", Projection(prefix + ".o", dim, dim, true));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                     const LoraSet* lora) const {
  const auto& src = context.defined() ? context : x;
  const auto b = x.size(0);
  const auto n = x.size(1);
  const auto m = src.size(1);
  const auto dim = q->out_features();
  const auto head_dim = dim / heads_;
  auto split = [&](const torch::Tensor& t, std::int64_t len) {
    return t.reshape({b, len, heads_, head_dim}).transpose(1, 2);
  };
  auto qh = split(q->forward(x, lora), n);
  auto kh = split(k->forward(src, lora), m);
  auto vh = split(v->forward(src, lora), m);
  auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto out = torch::matmul(torch::softmax(scores, -1), vh);
  return o->forward(out.transpose(1, 2).reshape({b, n, dim}), lora);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

}  // namespace dermaug
