#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermaug/backend.hpp"
#include "dermaug/conditioning.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/image_io.hpp"

namespace dermaug {

/// Base words every toy vocabulary carries, plus all condition-name words.
Vocabulary toy_vocabulary();

namespace toy {
class CodecEncoderImpl;
class CodecDecoderImpl;
class UNetImpl;
}  // namespace toy

struct ToyBackendConfig {
  std::int64_t image_size = 64;
  std::int64_t latent_channels = 4;
  std::int64_t latent_size = 8;
  std::int64_t codec_width = 64;
  std::int64_t unet_width = 32;
  std::int64_t unet_mid_width = 64;
  std::int64_t attention_heads = 4;
  std::int64_t text_dim = 32;
  std::int64_t text_heads = 4;
  std::int64_t max_prompt_len = 16;
  int timesteps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;

  void validate() const;
};
void to_json(nlohmann::json& j, const ToyBackendConfig& c);
void from_json(const nlohmann::json& j, ToyBackendConfig& c);

/// Built-in latent diffusion model small enough to pretrain on a CPU.
class ToyBackend final : public DiffusionBackend {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr const char* kArchiveKind = "toy-backend";

  /// Randomly initialized model; construction is deterministic in `seed`.
  ToyBackend(const ToyBackendConfig& config, std::uint64_t seed, Vocabulary vocab = toy_vocabulary());
  ~ToyBackend() override;

  static std::unique_ptr<ToyBackend> load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Deep copy including placeholder rows.
  std::unique_ptr<ToyBackend> clone() const;

  const BackendGeometry& geometry() const override { return geometry_; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  torch::Tensor encode(const torch::Tensor& images) const override;
  torch::Tensor decode(const torch::Tensor& latents) const override;
  torch::Tensor encode_prompt(const std::vector<std::string>& prompts,
                              const LoraSet* lora = nullptr) const override;
  torch::Tensor predict_eps(const torch::Tensor& z_t, const torch::Tensor& t,
                            const torch::Tensor& context, const LoraSet* lora = nullptr) const override;
  std::vector<ParameterGroup> parameter_groups() const override;
  std::vector<ProjectionSite> projection_sites() const override;
  torch::Tensor register_placeholder(const std::string& token, const std::string& init_word) override;
  torch::Tensor placeholder(const std::string& token) const override;
  std::vector<std::string> placeholder_tokens() const override;
  bool knows_token(const std::string& token) const override;
  double codec_tolerance() const override { return codec_tolerance_; }

  const ToyBackendConfig& config() const { return config_; }
  ConditioningEncoder& conditioning() { return text_; }

  /// Raw (un-normalized) codec access used during pretraining.
  torch::Tensor encode_raw(const torch::Tensor& images) const;
  torch::Tensor decode_raw(const torch::Tensor& latents) const;
  std::vector<torch::Tensor> codec_parameters() const;
  std::vector<torch::Tensor> generator_parameters() const;  // text encoder + U-Net

  void set_latent_normalization(torch::Tensor shift, torch::Tensor scale);
  void set_codec_tolerance(double tolerance) { codec_tolerance_ = tolerance; }
  /// Stops gradient accumulation in every base parameter.
  void freeze();

  nlohmann::json metadata;  // persisted with the checkpoint (e.g. pretraining summary)

 private:
  NamedTensors named_base_tensors() const;

  ToyBackendConfig config_;
  BackendGeometry geometry_;
  NoiseSchedule schedule_;
  std::shared_ptr<toy::CodecEncoderImpl> encoder_;
  std::shared_ptr<toy::CodecDecoderImpl> decoder_;
  std::shared_ptr<toy::UNetImpl> unet_;
  ConditioningEncoder text_{nullptr};
  torch::Tensor latent_shift_;
  torch::Tensor latent_scale_;
  double codec_tolerance_ = 0.0;
};

struct PretrainConfig {
  ToyBackendConfig backend;
  int codec_steps = 3000;
  double codec_lr = 2e-3;
  int codec_batch = 32;
  int codec_crop = 32;
  int denoiser_steps = 4000;
  double denoiser_lr = 1e-3;
  int denoiser_batch = 48;
  /// Probability a caption is replaced by the empty prompt (enables guidance).
  double cond_dropout = 0.1;
  /// Probability a caption names the condition instead of the generic "rash".
  double named_caption_prob = 0.25;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  /// Codec tolerance = this factor times the worst held-out RMSE.
  double tolerance_margin = 1.25;
  /// Exponential moving average of denoiser weights; 0 disables it.
  double ema_decay = 0.999;
  /// Cosine learning-rate decay to zero over the denoiser steps.
  bool cosine_decay = true;

  void validate() const;
};
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainReport {
  std::vector<double> codec_curve;
  std::vector<double> denoiser_curve;
  double holdout_rmse_mean = 0.0;
  double holdout_rmse_max = 0.0;
  double codec_tolerance = 0.0;
  std::size_t train_images = 0;
  std::size_t holdout_images = 0;
};
void to_json(nlohmann::json& j, const PretrainReport& r);

/// Caption used while pretraining: "an image of <word> on <group> skin".
std::string pretrain_caption(Condition condition, SkinGroup group, bool named);

/// Trains codec, then text encoder + denoiser on the codec's latents, and freezes
/// everything. Throws StageError if a loss turns non-finite.
std::unique_ptr<ToyBackend> train_toy_backend(const DatasetManifest& corpus, ImageStore& store,
                                              const PretrainConfig& config,
                                              PretrainReport* report = nullptr);

/// Per-image RMSE between images and D(E(images)).
torch::Tensor reconstruction_rmse(const DiffusionBackend& backend, const torch::Tensor& images);

}  // namespace dermaug
