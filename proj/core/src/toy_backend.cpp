#include "dermaug/toy_backend.hpp"

#include <cmath>
#include <random>

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "dermaug/tensor_archive.hpp"
#include "toy_nets.hpp"

namespace dermaug {

namespace {

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_int(std::int64_t v) {
  int n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

NamedTensors prefixed(const torch::nn::Module& module, const std::string& prefix) {
  NamedTensors out;
  for (const auto& item : module.named_parameters()) out.emplace_back(prefix + item.key(), item.value());
  return out;
}

void append(NamedTensors& into, NamedTensors from) {
  for (auto& t : from) into.push_back(std::move(t));
}

void check_finite(double loss, const char* stage, int step) {
  if (!std::isfinite(loss)) {
    throw StageError(std::string(stage) + " loss became non-finite at step " + std::to_string(step));
  }
}

}  // namespace

void ToyBackendConfig::validate() const {
  if (image_size < 16 || !is_power_of_two(image_size)) {
    throw ValidationError("toy backend: image_size must be a power of two >= 16");
  }
  if (!is_power_of_two(latent_size) || latent_size >= image_size) {
    throw ValidationError("toy backend: latent_size must be a power of two below image_size");
  }
  if (latent_size < 2) throw ValidationError("toy backend: latent_size must be >= 2");
  if (latent_channels < 1 || codec_width < 8 || unet_width < 8 || unet_mid_width < 8) {
    throw ValidationError("toy backend: channel widths too small");
  }
  if (attention_heads < 1 || unet_width % attention_heads || unet_mid_width % attention_heads) {
    throw ValidationError("toy backend: attention heads must divide the U-Net widths");
  }
  if (text_heads < 1 || text_dim % text_heads) throw ValidationError("toy backend: text heads must divide text_dim");
  if (max_prompt_len < 3) throw ValidationError("toy backend: max_prompt_len must be >= 3");
}

void to_json(nlohmann::json& j, const ToyBackendConfig& c) {
  j = {{"image_size", c.image_size},     {"latent_channels", c.latent_channels},
       {"latent_size", c.latent_size},   {"codec_width", c.codec_width},
       {"unet_width", c.unet_width},     {"unet_mid_width", c.unet_mid_width},
       {"attention_heads", c.attention_heads}, {"text_dim", c.text_dim},
       {"text_heads", c.text_heads},     {"max_prompt_len", c.max_prompt_len},
       {"timesteps", c.timesteps},       {"beta_min", c.beta_min},
       {"beta_max", c.beta_max}};
}

void from_json(const nlohmann::json& j, ToyBackendConfig& c) {
  ToyBackendConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.latent_size = j.value("latent_size", d.latent_size);
  c.codec_width = j.value("codec_width", d.codec_width);
  c.unet_width = j.value("unet_width", d.unet_width);
  c.unet_mid_width = j.value("unet_mid_width", d.unet_mid_width);
  c.attention_heads = j.value("attention_heads", d.attention_heads);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.text_heads = j.value("text_heads", d.text_heads);
  c.max_prompt_len = j.value("max_prompt_len", d.max_prompt_len);
  c.timesteps = j.value("timesteps", d.timesteps);
  c.beta_min = j.value("beta_min", d.beta_min);
  c.beta_max = j.value("beta_max", d.beta_max);
}

Vocabulary toy_vocabulary() {
  Vocabulary v({"a", "an", "image", "of", "on", "light", "dark", "skin", "rash", "lesion", "photo"});
  for (auto c : kAllConditions) {
    for (const auto& w : tokenize(condition_name(c))) v.add(w);
  }
  return v;
}

ToyBackend::ToyBackend(const ToyBackendConfig& config, std::uint64_t seed, Vocabulary vocab)
    : config_(config) {
  config_.validate();
  schedule_ = make_schedule(config_.timesteps, config_.beta_min, config_.beta_max);
  geometry_.image_channels = 3;
  geometry_.image_size = config_.image_size;
  geometry_.latent_channels = config_.latent_channels;
  geometry_.latent_size = config_.latent_size;
  geometry_.context_len = config_.max_prompt_len;
  geometry_.context_dim = config_.text_dim;

  torch::manual_seed(seed);
  const int levels = log2_int(config_.image_size / config_.latent_size);
  encoder_ = std::make_shared<toy::CodecEncoderImpl>(3, config_.latent_channels, config_.codec_width, levels);
  decoder_ = std::make_shared<toy::CodecDecoderImpl>(3, config_.latent_channels, config_.codec_width, levels);
  toy::UNetOptions o;
  o.latent_channels = config_.latent_channels;
  o.width = config_.unet_width;
  o.mid_width = config_.unet_mid_width;
  o.context_dim = config_.text_dim;
  o.heads = config_.attention_heads;
  o.time_dim = 4 * config_.unet_width;
  unet_ = std::make_shared<toy::UNetImpl>(o);
  text_ = ConditioningEncoder(std::move(vocab),
                              TextEncoderConfig{config_.text_dim, config_.max_prompt_len, config_.text_heads});
  latent_shift_ = torch::zeros({config_.latent_channels});
  latent_scale_ = torch::ones({config_.latent_channels});
}

ToyBackend::~ToyBackend() = default;

torch::Tensor ToyBackend::encode_raw(const torch::Tensor& images) const { return encoder_->forward(images); }

torch::Tensor ToyBackend::decode_raw(const torch::Tensor& latents) const { return decoder_->forward(latents); }

torch::Tensor ToyBackend::encode(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.image_size ||
      images.size(3) != config_.image_size) {
    throw ValidationError("encode: expected images [B, 3, " + std::to_string(config_.image_size) + ", " +
                          std::to_string(config_.image_size) + "]");
  }
  const auto c = config_.latent_channels;
  return (encode_raw(images) - latent_shift_.view({1, c, 1, 1})) / latent_scale_.view({1, c, 1, 1});
}

torch::Tensor ToyBackend::decode(const torch::Tensor& latents) const {
  const auto c = config_.latent_channels;
  if (latents.dim() != 4 || latents.size(1) != c) throw ValidationError("decode: bad latent shape");
  return decode_raw(latents * latent_scale_.view({1, c, 1, 1}) + latent_shift_.view({1, c, 1, 1}));
}

torch::Tensor ToyBackend::encode_prompt(const std::vector<std::string>& prompts, const LoraSet* lora) const {
  return text_->forward(prompts, lora);
}

torch::Tensor ToyBackend::predict_eps(const torch::Tensor& z_t, const torch::Tensor& t,
                                      const torch::Tensor& context, const LoraSet* lora) const {
  if (z_t.dim() != 4 || z_t.size(1) != config_.latent_channels) {
    throw ValidationError("predict_eps: bad latent shape");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0) || context.size(0) != z_t.size(0)) {
    throw ValidationError("predict_eps: batch sizes of z_t, t and context differ");
  }
  return unet_->forward(z_t, t, context, lora);
}

std::vector<ParameterGroup> ToyBackend::parameter_groups() const {
  std::vector<ParameterGroup> groups;
  ParameterGroup codec{"codec", prefixed(*encoder_, "encoder.")};
  append(codec.tensors, prefixed(*decoder_, "decoder."));
  codec.tensors.emplace_back("latent_shift", latent_shift_);
  codec.tensors.emplace_back("latent_scale", latent_scale_);
  groups.push_back(std::move(codec));

  ParameterGroup table{"embedding_table", {{"token_embedding", text_->token_embedding}}};
  ParameterGroup text{"text_encoder", {}};
  for (const auto& item : text_->named_parameters()) {
    if (item.key() != "token_embedding") text.tensors.emplace_back(item.key(), item.value());
  }
  groups.push_back(std::move(text));
  groups.push_back(std::move(table));
  groups.push_back({"denoiser", prefixed(*unet_, "")});

  ParameterGroup placeholders{"placeholders", {}};
  for (const auto& token : text_->placeholder_tokens()) {
    placeholders.tensors.emplace_back(token, text_->placeholder(token));
  }
  groups.push_back(std::move(placeholders));
  return groups;
}

std::vector<ProjectionSite> ToyBackend::projection_sites() const {
  std::vector<ProjectionSite> sites;
  auto collect = [&](const torch::nn::Module& root, const std::string& component) {
    for (const auto& m : root.modules(/*include_self=*/false)) {
      if (const auto* p = m->as<ProjectionImpl>()) {
        sites.push_back({p->site(), component, p->in_features(), p->out_features(), p->weight});
      }
    }
  };
  collect(*unet_, "denoiser");
  collect(*text_, "text_encoder");
  return sites;
}

torch::Tensor ToyBackend::register_placeholder(const std::string& token, const std::string& init_word) {
  return text_->register_placeholder(token, init_word);
}

torch::Tensor ToyBackend::placeholder(const std::string& token) const { return text_->placeholder(token); }

std::vector<std::string> ToyBackend::placeholder_tokens() const { return text_->placeholder_tokens(); }

bool ToyBackend::knows_token(const std::string& token) const { return text_->knows(token); }

std::vector<torch::Tensor> ToyBackend::codec_parameters() const {
  auto p = encoder_->parameters();
  for (auto& t : decoder_->parameters()) p.push_back(t);
  return p;
}

std::vector<torch::Tensor> ToyBackend::generator_parameters() const {
  auto p = unet_->parameters();
  for (auto& t : text_->parameters()) p.push_back(t);
  return p;
}

void ToyBackend::set_latent_normalization(torch::Tensor shift, torch::Tensor scale) {
  if (shift.numel() != config_.latent_channels || scale.numel() != config_.latent_channels) {
    throw ValidationError("latent normalization needs one value per latent channel");
  }
  latent_shift_ = shift.detach().to(torch::kFloat32).reshape({config_.latent_channels}).clone();
  latent_scale_ = scale.detach().to(torch::kFloat32).reshape({config_.latent_channels}).clone();
}

void ToyBackend::freeze() {
  for (auto& p : codec_parameters()) p.requires_grad_(false);
  for (auto& p : generator_parameters()) p.requires_grad_(false);
}

NamedTensors ToyBackend::named_base_tensors() const {
  NamedTensors out;
  for (const auto& g : parameter_groups()) {
    for (const auto& [name, t] : g.tensors) out.emplace_back(g.name + "/" + name, t);
  }
  return out;
}

void ToyBackend::save(const std::filesystem::path& path) const {
  TensorArchive a;
  a.kind = kArchiveKind;
  a.format_version = kFormatVersion;
  a.meta = {{"config", config_},
            {"vocabulary", text_->vocabulary().tokens()},
            {"placeholders", text_->placeholder_tokens()},
            {"codec_tolerance", codec_tolerance_},
            {"schedule", {{"steps", schedule_.steps}, {"beta_min", config_.beta_min}, {"beta_max", config_.beta_max}}},
            {"fingerprint", fingerprint()},
            {"metadata", metadata}};
  for (const auto& [name, t] : named_base_tensors()) a.tensors.emplace_back(name, t.detach());
  write_archive(path, a);
}

std::unique_ptr<ToyBackend> ToyBackend::load(const std::filesystem::path& path) {
  const auto a = read_archive(path, kArchiveKind, kFormatVersion);
  ToyBackendConfig config = a.meta.at("config").get<ToyBackendConfig>();
  Vocabulary vocab;
  for (const auto& w : a.meta.at("vocabulary").get<std::vector<std::string>>()) vocab.add(w);
  auto b = std::make_unique<ToyBackend>(config, 0, std::move(vocab));
  for (const auto& token : a.meta.at("placeholders").get<std::vector<std::string>>()) {
    b->register_placeholder(token, std::string(Vocabulary::kPad));
  }
  b->set_latent_normalization(a.at("codec/latent_shift"), a.at("codec/latent_scale"));
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : b->named_base_tensors()) {
    const auto& src = a.at(name);
    if (src.sizes() != t.sizes()) throw ValidationError("checkpoint tensor '" + name + "' has the wrong shape");
    t.copy_(src);
  }
  b->codec_tolerance_ = a.meta.value("codec_tolerance", 0.0);
  b->metadata = a.meta.value("metadata", nlohmann::json::object());
  b->freeze();
  return b;
}

std::unique_ptr<ToyBackend> ToyBackend::clone() const {
  auto b = std::make_unique<ToyBackend>(config_, 0, text_->vocabulary());
  for (const auto& token : placeholder_tokens()) b->register_placeholder(token, std::string(Vocabulary::kPad));
  b->set_latent_normalization(latent_shift_, latent_scale_);
  {
    torch::NoGradGuard no_grad;
    auto dst = b->named_base_tensors();
    auto src = named_base_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second.copy_(src[i].second);
  }
  b->codec_tolerance_ = codec_tolerance_;
  b->metadata = metadata;
  b->freeze();
  return b;
}

void PretrainConfig::validate() const {
  backend.validate();
  if (codec_steps < 0 || denoiser_steps < 0) throw ValidationError("pretrain: step counts must be >= 0");
  if (codec_lr <= 0 || denoiser_lr <= 0) throw ValidationError("pretrain: learning rates must be > 0");
  if (codec_batch < 1 || denoiser_batch < 1) throw ValidationError("pretrain: batch sizes must be >= 1");
  const auto factor = backend.image_size / backend.latent_size;
  if (codec_crop != 0 && (codec_crop % factor != 0 || codec_crop > backend.image_size)) {
    throw ValidationError("pretrain: codec_crop must be 0 or a multiple of the spatial factor <= image_size");
  }
  if (cond_dropout < 0 || cond_dropout > 1 || named_caption_prob < 0 || named_caption_prob > 1) {
    throw ValidationError("pretrain: probabilities must lie in [0, 1]");
  }
  if (holdout_fraction < 0 || holdout_fraction >= 1) throw ValidationError("pretrain: holdout_fraction in [0, 1)");
  if (tolerance_margin < 1) throw ValidationError("pretrain: tolerance_margin must be >= 1");
  if (ema_decay < 0 || ema_decay >= 1) throw ValidationError("pretrain: ema_decay in [0, 1)");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"backend", c.backend},
       {"codec_steps", c.codec_steps},
       {"codec_lr", c.codec_lr},
       {"codec_batch", c.codec_batch},
       {"codec_crop", c.codec_crop},
       {"denoiser_steps", c.denoiser_steps},
       {"denoiser_lr", c.denoiser_lr},
       {"denoiser_batch", c.denoiser_batch},
       {"cond_dropout", c.cond_dropout},
       {"named_caption_prob", c.named_caption_prob},
       {"holdout_fraction", c.holdout_fraction},
       {"seed", c.seed},
       {"tolerance_margin", c.tolerance_margin},
       {"ema_decay", c.ema_decay},
       {"cosine_decay", c.cosine_decay}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  if (j.contains("backend")) c.backend = j.at("backend").get<ToyBackendConfig>();
  c.codec_steps = j.value("codec_steps", d.codec_steps);
  c.codec_lr = j.value("codec_lr", d.codec_lr);
  c.codec_batch = j.value("codec_batch", d.codec_batch);
  c.codec_crop = j.value("codec_crop", d.codec_crop);
  c.denoiser_steps = j.value("denoiser_steps", d.denoiser_steps);
  c.denoiser_lr = j.value("denoiser_lr", d.denoiser_lr);
  c.denoiser_batch = j.value("denoiser_batch", d.denoiser_batch);
  c.cond_dropout = j.value("cond_dropout", d.cond_dropout);
  c.named_caption_prob = j.value("named_caption_prob", d.named_caption_prob);
  c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  c.seed = j.value("seed", d.seed);
  c.tolerance_margin = j.value("tolerance_margin", d.tolerance_margin);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.cosine_decay = j.value("cosine_decay", d.cosine_decay);
}

void to_json(nlohmann::json& j, const PretrainReport& r) {
  j = {{"codec_curve", r.codec_curve},
       {"denoiser_curve", r.denoiser_curve},
       {"holdout_rmse_mean", r.holdout_rmse_mean},
       {"holdout_rmse_max", r.holdout_rmse_max},
       {"codec_tolerance", r.codec_tolerance},
       {"train_images", r.train_images},
       {"holdout_images", r.holdout_images}};
}

std::string pretrain_caption(Condition condition, SkinGroup group, bool named) {
  const std::string word = named ? std::string(condition_name(condition)) : "rash";
  return "an image of " + word + " on " + std::string(group_name(group)) + " skin";
}

torch::Tensor reconstruction_rmse(const DiffusionBackend& backend, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto recon = backend.decode(backend.encode(images));
  return (recon - images).pow(2).flatten(1).mean(1).sqrt();
}

std::unique_ptr<ToyBackend> train_toy_backend(const DatasetManifest& corpus, ImageStore& store,
                                              const PretrainConfig& config, PretrainReport* report) {
  config.validate();
  if (corpus.records.empty()) throw ValidationError("pretrain: corpus is empty");
  const auto size = static_cast<int>(config.backend.image_size);
  auto backend = std::make_unique<ToyBackend>(config.backend, derive_seed(config.seed, "toy-init"));

  std::vector<std::filesystem::path> paths;
  for (const auto& r : corpus.records) paths.push_back(r.image_path);
  const auto images = store.load_batch(paths, size);
  const auto n = images.size(0);

  auto gen = make_generator(derive_seed(config.seed, "toy-pretrain"));
  const auto order = torch::randperm(n, gen, torch::kLong);
  std::int64_t n_hold = static_cast<std::int64_t>(std::floor(config.holdout_fraction * static_cast<double>(n)));
  if (config.holdout_fraction > 0 && n_hold == 0 && n > 1) n_hold = 1;
  const auto hold_idx = order.slice(0, 0, n_hold);
  const auto train_idx = order.slice(0, n_hold, n);
  const auto train_images = images.index_select(0, train_idx);
  const auto hold_images = n_hold > 0 ? images.index_select(0, hold_idx) : train_images;
  const auto n_train = train_images.size(0);

  PretrainReport rep;
  rep.train_images = static_cast<std::size_t>(n_train);
  rep.holdout_images = static_cast<std::size_t>(n_hold);

  // Codec.
  const int crop = config.codec_crop == 0 ? size : config.codec_crop;
  {
    torch::optim::Adam opt(backend->codec_parameters(), torch::optim::AdamOptions(config.codec_lr));
    for (int step = 0; step < config.codec_steps; ++step) {
      auto idx = torch::randint(0, n_train, {config.codec_batch}, gen, torch::kLong);
      auto batch = train_images.index_select(0, idx);
      if (crop < size) {
        const auto factor = size / static_cast<int>(config.backend.latent_size);
        const auto slots = (size - crop) / factor + 1;
        std::vector<torch::Tensor> crops;
        auto offsets = torch::randint(0, slots, {config.codec_batch, 2}, gen, torch::kLong);
        auto acc = offsets.accessor<std::int64_t, 2>();
        for (int i = 0; i < config.codec_batch; ++i) {
          crops.push_back(batch[i]
                              .narrow(1, acc[i][0] * factor, crop)
                              .narrow(2, acc[i][1] * factor, crop));
        }
        batch = torch::stack(crops);
      }
      auto flip = torch::rand({config.codec_batch}, gen) < 0.5;
      batch = torch::where(flip.view({-1, 1, 1, 1}), batch.flip({3}), batch);
      auto z = backend->encode_raw(batch);
      auto recon = backend->decode_raw(z);
      auto loss = torch::mse_loss(recon, batch) + 0.1 * (recon - batch).abs().mean() + 1e-4 * z.pow(2).mean();
      const double value = loss.item<double>();
      check_finite(value, "codec", step);
      rep.codec_curve.push_back(value);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }

  torch::Tensor latents;
  {
    torch::NoGradGuard no_grad;
    auto raw = torch::cat({backend->encode_raw(images), backend->encode_raw(images.flip({3}))}, 0);
    auto shift = raw.mean({0, 2, 3});
    auto scale = raw.std({0, 2, 3}).clamp_min(1e-6);
    backend->set_latent_normalization(shift, scale);
    const auto c = config.backend.latent_channels;
    latents = (raw - shift.view({1, c, 1, 1})) / scale.view({1, c, 1, 1});
    auto rmse = reconstruction_rmse(*backend, hold_images);
    rep.holdout_rmse_mean = rmse.mean().item<double>();
    rep.holdout_rmse_max = rmse.max().item<double>();
    rep.codec_tolerance = config.tolerance_margin * rep.holdout_rmse_max;
    backend->set_codec_tolerance(rep.codec_tolerance);
  }

  // Text encoder + denoiser on the frozen codec's latents (originals then mirrored copies).
  {
    for (auto& p : backend->codec_parameters()) p.requires_grad_(false);
    auto params = backend->generator_parameters();
    torch::optim::Adam opt(params, torch::optim::AdamOptions(config.denoiser_lr));
    std::vector<torch::Tensor> ema;
    if (config.ema_decay > 0) {
      for (const auto& p : params) ema.push_back(p.detach().clone());
    }
    std::mt19937_64 rng(derive_seed(config.seed, "toy-captions"));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto total = latents.size(0);
    for (int step = 0; step < config.denoiser_steps; ++step) {
      auto idx = torch::randint(0, total, {config.denoiser_batch}, gen, torch::kLong);
      auto acc = idx.accessor<std::int64_t, 1>();
      std::vector<std::string> prompts;
      prompts.reserve(static_cast<std::size_t>(config.denoiser_batch));
      for (int i = 0; i < config.denoiser_batch; ++i) {
        const auto& r = corpus.records[static_cast<std::size_t>(acc[i] % n)];
        const bool drop = u(rng) < config.cond_dropout;
        const bool named = u(rng) < config.named_caption_prob;
        prompts.push_back(drop ? std::string() : pretrain_caption(r.condition, r.group(), named));
      }
      auto loss = ldm_loss_latents(latents.index_select(0, idx), prompts, *backend, nullptr, gen);
      const double value = loss.item<double>();
      check_finite(value, "denoiser", step);
      rep.denoiser_curve.push_back(value);
      opt.zero_grad();
      loss.backward();
      torch::nn::utils::clip_grad_norm_(params, 1.0);
      const double progress = static_cast<double>(step) / config.denoiser_steps;
      const double lr = config.cosine_decay ? config.denoiser_lr * 0.5 * (1.0 + std::cos(M_PI * progress))
                                            : config.denoiser_lr;
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      opt.step();
      if (!ema.empty()) {
        torch::NoGradGuard no_grad;
        const double decay = std::min(config.ema_decay, (1.0 + step) / (10.0 + step));
        for (std::size_t i = 0; i < params.size(); ++i) ema[i].mul_(decay).add_(params[i].detach(), 1.0 - decay);
      }
    }
    if (!ema.empty()) {
      torch::NoGradGuard no_grad;
      for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(ema[i]);
    }
  }

  backend->freeze();
  nlohmann::json summary = rep;
  summary.erase("codec_curve");
  summary.erase("denoiser_curve");
  const auto c = summarize_curve(rep.codec_curve);
  const auto d = summarize_curve(rep.denoiser_curve);
  summary["codec_loss"] = {{"start", c.start}, {"end", c.end}};
  summary["denoiser_loss"] = {{"start", d.start}, {"end", d.end}};
  backend->metadata = {{"pretrain", config}, {"summary", summary}, {"corpus", corpus.source_id}};
  if (report) *report = std::move(rep);
  return backend;
}

}  // namespace dermaug
