#pragma once

#include <torch/torch.h>

#include "dermaug/layers.hpp"

namespace dermaug::toy {

/// Convolutional encoder: `n_down` stride-2 stages from image to latent grid.
class CodecEncoderImpl : public torch::nn::Module {
 public:
  CodecEncoderImpl(std::int64_t image_channels, std::int64_t latent_channels, std::int64_t width,
                   int n_down);
  torch::Tensor forward(const torch::Tensor& images) const;

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(CodecEncoder);

class CodecDecoderImpl : public torch::nn::Module {
 public:
  CodecDecoderImpl(std::int64_t image_channels, std::int64_t latent_channels, std::int64_t width,
                   int n_up);
  torch::Tensor forward(const torch::Tensor& latents) const;

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(CodecDecoder);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb) const;

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Self-attention, cross-attention over the conditioning sequence, then MLP.
class SpatialTransformerImpl : public torch::nn::Module {
 public:
  SpatialTransformerImpl(const std::string& prefix, std::int64_t channels, std::int64_t context_dim,
                         std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, const LoraSet* lora) const;

  Attention self_attn{nullptr}, cross_attn{nullptr};

 private:
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr}, ln3_{nullptr};
  torch::nn::Linear ff_in_{nullptr}, ff_out_{nullptr};
};
TORCH_MODULE(SpatialTransformer);

struct UNetOptions {
  std::int64_t latent_channels = 4;
  std::int64_t width = 32;
  std::int64_t mid_width = 64;
  std::int64_t context_dim = 32;
  std::int64_t heads = 4;
  std::int64_t time_dim = 128;
};

/// Two-level U-Net with attention at every level; attention projection sites
/// are prefixed "unet.down", "unet.mid" and "unet.up".
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetOptions& options);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& context,
                        const LoraSet* lora) const;

 private:
  UNetOptions options_;
  torch::nn::Linear time_in_{nullptr}, time_out_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr}, down_{nullptr}, up_conv_{nullptr}, conv_out_{nullptr};
  ResBlock res_down_{nullptr}, res_mid1_{nullptr}, res_mid2_{nullptr}, res_up_{nullptr};
  SpatialTransformer attn_down_{nullptr}, attn_mid_{nullptr}, attn_up_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace dermaug::toy
