#include "toy_nets.hpp"

namespace dermaug::toy {
namespace nn = torch::nn;

namespace {

nn::Conv2d conv3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

std::int64_t groups_for(std::int64_t channels) { return channels % 8 == 0 ? 8 : 1; }

}  // namespace

CodecEncoderImpl::CodecEncoderImpl(std::int64_t image_channels, std::int64_t latent_channels,
                                   std::int64_t width, int n_down) {
  body_ = nn::Sequential();
  const std::int64_t stem = std::max<std::int64_t>(8, width / 2);
  body_->push_back(conv3(image_channels, stem));
  body_->push_back(nn::SiLU());
  std::int64_t channels = stem;
  for (int i = 0; i < n_down; ++i) {
    body_->push_back(conv3(channels, width, 2));
    body_->push_back(nn::SiLU());
    channels = width;
  }
  body_->push_back(conv3(channels, width));
  body_->push_back(nn::SiLU());
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(width, latent_channels, 1)));
  register_module("body", body_);
}

torch::Tensor CodecEncoderImpl::forward(const torch::Tensor& images) const {
  return body_.ptr()->forward(images * 2.0 - 1.0);
}

CodecDecoderImpl::CodecDecoderImpl(std::int64_t image_channels, std::int64_t latent_channels,
                                   std::int64_t width, int n_up) {
  body_ = nn::Sequential();
  body_->push_back(conv3(latent_channels, width));
  body_->push_back(nn::SiLU());
  body_->push_back(conv3(width, width));
  body_->push_back(nn::SiLU());
  std::int64_t channels = width;
  for (int i = 0; i < n_up; ++i) {
    const std::int64_t next = i + 2 >= n_up ? std::max<std::int64_t>(8, width / 2) : width;
    body_->push_back(nn::Upsample(nn::UpsampleOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest)));
    body_->push_back(conv3(channels, next));
    body_->push_back(nn::SiLU());
    channels = next;
  }
  body_->push_back(conv3(channels, image_channels));
  register_module("body", body_);
}

torch::Tensor CodecDecoderImpl::forward(const torch::Tensor& latents) const {
  return torch::sigmoid(body_.ptr()->forward(latents));
}

ResBlockImpl::ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t time_dim) {
  norm1_ = register_module("norm1", nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1_ = register_module("conv1", conv3(in_channels, out_channels));
  time_ = register_module("time", nn::Linear(time_dim, out_channels));
  norm2_ = register_module("norm2", nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) const {
  auto h = conv1_.ptr()->forward(torch::silu(norm1_.ptr()->forward(x)));
  h = h + time_.ptr()->forward(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_.ptr()->forward(torch::silu(norm2_.ptr()->forward(h)));
  return h + (skip_ ? skip_.ptr()->forward(x) : x);
}

SpatialTransformerImpl::SpatialTransformerImpl(const std::string& prefix, std::int64_t channels,
                                               std::int64_t context_dim, std::int64_t heads) {
  ln1_ = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
  self_attn = register_module("self_attn", Attention(prefix + ".self", channels, channels, heads));
  ln2_ = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
  cross_attn = register_module("cross_attn", Attention(prefix + ".cross", channels, context_dim, heads));
  ln3_ = register_module("ln3", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ff_in_ = register_module("ff_in", nn::Linear(channels, 2 * channels));
  ff_out_ = register_module("ff_out", nn::Linear(2 * channels, channels));
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                              const LoraSet* lora) const {
  const auto b = x.size(0);
  const auto c = x.size(1);
  const auto hgt = x.size(2);
  const auto wid = x.size(3);
  auto h = x.flatten(2).transpose(1, 2);  // [B, HW, C]
  h = h + self_attn.ptr()->forward(ln1_.ptr()->forward(h), torch::Tensor(), lora);
  h = h + cross_attn.ptr()->forward(ln2_.ptr()->forward(h), context, lora);
  h = h + ff_out_.ptr()->forward(torch::gelu(ff_in_.ptr()->forward(ln3_.ptr()->forward(h))));
  return h.transpose(1, 2).reshape({b, c, hgt, wid});
}

UNetImpl::UNetImpl(const UNetOptions& o) : options_(o) {
  time_in_ = register_module("time_in", nn::Linear(o.width, o.time_dim));
  time_out_ = register_module("time_out", nn::Linear(o.time_dim, o.time_dim));
  conv_in_ = register_module("conv_in", conv3(o.latent_channels, o.width));
  res_down_ = register_module("res_down", ResBlock(o.width, o.width, o.time_dim));
  attn_down_ = register_module("attn_down", SpatialTransformer("unet.down", o.width, o.context_dim, o.heads));
  down_ = register_module("down", conv3(o.width, o.mid_width, 2));
  res_mid1_ = register_module("res_mid1", ResBlock(o.mid_width, o.mid_width, o.time_dim));
  attn_mid_ = register_module("attn_mid", SpatialTransformer("unet.mid", o.mid_width, o.context_dim, o.heads));
  res_mid2_ = register_module("res_mid2", ResBlock(o.mid_width, o.mid_width, o.time_dim));
  up_conv_ = register_module("up_conv", conv3(o.mid_width, o.width));
  res_up_ = register_module("res_up", ResBlock(2 * o.width, o.width, o.time_dim));
  attn_up_ = register_module("attn_up", SpatialTransformer("unet.up", o.width, o.context_dim, o.heads));
  norm_out_ = register_module("norm_out", nn::GroupNorm(groups_for(o.width), o.width));
  conv_out_ = register_module("conv_out", conv3(o.width, o.latent_channels));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z, const torch::Tensor& t,
                                const torch::Tensor& context, const LoraSet* lora) const {
  auto temb = time_out_.ptr()->forward(torch::silu(time_in_.ptr()->forward(timestep_embedding(t, options_.width))));
  auto h = conv_in_.ptr()->forward(z);
  auto skip = attn_down_.ptr()->forward(res_down_.ptr()->forward(h, temb), context, lora);
  auto m = down_.ptr()->forward(skip);
  m = res_mid1_.ptr()->forward(m, temb);
  m = attn_mid_.ptr()->forward(m, context, lora);
  m = res_mid2_.ptr()->forward(m, temb);
  namespace F = torch::nn::functional;
  auto u = F::interpolate(m, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                                 .mode(torch::kNearest));
  u = up_conv_.ptr()->forward(u);
  u = res_up_.ptr()->forward(torch::cat({u, skip}, 1), temb);
  u = attn_up_.ptr()->forward(u, context, lora);
  return conv_out_.ptr()->forward(torch::silu(norm_out_.ptr()->forward(u)));
}

}  // namespace dermaug::toy
