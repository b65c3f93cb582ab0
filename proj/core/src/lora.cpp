#include "dermaug/lora.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "dermaug/tensor_archive.hpp"

namespace dermaug {

namespace {

constexpr const char* kLoraKind = "lora";
constexpr int kLoraVersion = 1;

}  // namespace

std::vector<std::string> default_lora_targets(const DiffusionBackend& backend, bool include_text_encoder) {
  std::vector<std::string> out;
  for (const auto& site : backend.projection_sites()) {
    if (site.component == "denoiser" || (include_text_encoder && site.component == "text_encoder")) {
      out.push_back(site.id);
    }
  }
  return out;
}

AdaptedDenoiser attach_lora(std::shared_ptr<DiffusionBackend> base, const std::vector<std::string>& targets,
                            int rank, double alpha, std::uint64_t seed) {
  if (!base) throw ValidationError("attach_lora: no base backend");
  const auto sites = base->projection_sites();
  AdaptedDenoiser adapted{base, {}};
  auto gen = make_generator(derive_seed(seed, "lora-init"));
  std::set<std::string> seen;
  for (const auto& target : targets) {
    auto it = std::find_if(sites.begin(), sites.end(), [&](const ProjectionSite& s) { return s.id == target; });
    if (it == sites.end()) throw ValidationError("attach_lora: unknown layer '" + target + "'");
    if (!seen.insert(target).second) throw ValidationError("attach_lora: layer '" + target + "' listed twice");
    const auto limit = std::min(it->in_features, it->out_features);
    if (rank <= 0 || rank >= limit) {
      throw ValidationError("attach_lora: rank " + std::to_string(rank) + " outside (0, " +
                            std::to_string(limit) + ") for '" + target + "'");
    }
    LoraAdapter a;
    a.target = target;
    a.rank = rank;
    a.alpha = alpha;
    a.A = torch::randn({it->out_features, rank}, gen) / std::sqrt(static_cast<double>(rank));
    a.B = torch::zeros({rank, it->in_features});
    adapted.adapters.insert(std::move(a));
  }
  return adapted;
}

void LoraConfig::validate() const {
  if (rank <= 0) throw ValidationError("lora: rank must be > 0");
  if (steps < 0) throw ValidationError("lora: steps must be >= 0");
  if (!(lr > 0)) throw ValidationError("lora: lr must be > 0");
  if (batch_size < 1) throw ValidationError("lora: batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const LoraConfig& c) {
  j = {{"rank", c.rank},
       {"alpha", c.alpha},
       {"lr", c.lr},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"include_text_encoder", c.include_text_encoder},
       {"targets", c.targets},
       {"seed", c.seed},
       {"flip_augment", c.flip_augment}};
}

void from_json(const nlohmann::json& j, LoraConfig& c) {
  LoraConfig d;
  c.rank = j.value("rank", d.rank);
  c.alpha = j.value("alpha", d.alpha);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.include_text_encoder = j.value("include_text_encoder", d.include_text_encoder);
  c.targets = j.value("targets", d.targets);
  c.seed = j.value("seed", d.seed);
  c.flip_augment = j.value("flip_augment", d.flip_augment);
}

PromptBuilder default_prompt_builder(const ConceptTokens& concepts, const PromptTemplate& tmpl) {
  return [concepts, tmpl](const ImageRecord& r) { return build_prompt(r.condition, r.group(), concepts, tmpl); };
}

LoraReport train_lora(AdaptedDenoiser& adapted, const DatasetManifest& train, const ConceptTokens& concepts,
                      const LoraConfig& config, const PromptBuilder& prompt_builder, ImageStore& store) {
  config.validate();
  if (train.empty()) throw ValidationError("lora: empty training set");
  for (const auto& r : train.records) {
    if (!concepts.count(r.condition)) {
      throw ValidationError("lora: no concept for condition '" + std::string(condition_name(r.condition)) + "'");
    }
  }
  auto& backend = *adapted.base;
  std::vector<std::string> prompts;
  std::vector<std::filesystem::path> paths;
  for (const auto& r : train.records) {
    prompts.push_back(prompt_builder(r));
    paths.push_back(r.image_path);
  }
  torch::Tensor latents;
  {
    torch::NoGradGuard no_grad;
    auto images = store.load_batch(paths, static_cast<int>(backend.geometry().image_size));
    latents = backend.encode(images);
    if (config.flip_augment) latents = torch::cat({latents, backend.encode(images.flip({3}))}, 0);
  }
  const auto n = static_cast<std::int64_t>(train.size());

  LoraReport report;
  if (config.steps == 0 || adapted.adapters.empty()) return report;
  std::vector<torch::Tensor> params;
  for (auto& [target, a] : adapted.adapters) {
    a.A.requires_grad_(true);
    a.B.requires_grad_(true);
    params.push_back(a.A);
    params.push_back(a.B);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(config.lr));
  auto gen = make_generator(derive_seed(config.seed, "lora-train"));
  for (int step = 0; step < config.steps; ++step) {
    auto idx = torch::randint(0, latents.size(0), {config.batch_size}, gen, torch::kLong);
    auto acc = idx.accessor<std::int64_t, 1>();
    std::vector<std::string> batch_prompts;
    for (int i = 0; i < config.batch_size; ++i) batch_prompts.push_back(prompts[static_cast<std::size_t>(acc[i] % n)]);
    auto loss = ldm_loss_latents(latents.index_select(0, idx), batch_prompts, backend, &adapted.adapters, gen);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      for (auto& p : params) p.requires_grad_(false);
      throw StageError("lora: non-finite loss at step " + std::to_string(step));
    }
    report.loss_curve.push_back(value);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  for (auto& [target, a] : adapted.adapters) {
    a.A = a.A.detach();
    a.B = a.B.detach();
  }
  return report;
}

AdaptedDenoiser fit_lora(std::shared_ptr<DiffusionBackend> base, const DatasetManifest& train,
                         const ConceptTokens& concepts, const LoraConfig& config,
                         const PromptBuilder& prompt_builder, ImageStore& store, LoraReport* report) {
  config.validate();
  const auto targets =
      config.targets.empty() ? default_lora_targets(*base, config.include_text_encoder) : config.targets;
  auto adapted = attach_lora(std::move(base), targets, config.rank, config.alpha, config.seed);
  auto r = train_lora(adapted, train, concepts, config, prompt_builder, store);
  if (report) *report = std::move(r);
  return adapted;
}

void save_adapters(const std::filesystem::path& path, const LoraSet& adapters, const DiffusionBackend& backend) {
  TensorArchive a;
  a.kind = kLoraKind;
  a.format_version = kLoraVersion;
  std::vector<std::string> targets;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [target, ad] : adapters) {
    targets.push_back(target);
    entries.push_back({{"target", target}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    a.tensors.emplace_back(target + ".A", ad.A.detach());
    a.tensors.emplace_back(target + ".B", ad.B.detach());
  }
  a.meta = {{"targets", targets},
            {"adapters", entries},
            {"rank", adapters.empty() ? 0 : adapters.begin()->second.rank},
            {"alpha", adapters.empty() ? 0.0 : adapters.begin()->second.alpha},
            {"backend_fingerprint", backend.fingerprint()},
            {"version", kLoraVersion}};
  write_archive(path, a);
}

LoraSet load_adapters(const std::filesystem::path& path, const DiffusionBackend& backend) {
  const auto a = read_archive(path, kLoraKind, kLoraVersion);
  const auto expected = a.meta.at("backend_fingerprint").get<std::string>();
  if (expected != backend.fingerprint()) {
    throw ValidationError(path.string() + ": adapters were trained against backend " + expected.substr(0, 12) +
                          ", not " + backend.fingerprint().substr(0, 12));
  }
  const auto sites = backend.projection_sites();
  LoraSet out;
  for (const auto& e : a.meta.at("adapters")) {
    LoraAdapter ad;
    ad.target = e.at("target").get<std::string>();
    ad.rank = e.at("rank").get<int>();
    ad.alpha = e.at("alpha").get<double>();
    ad.A = a.at(ad.target + ".A").clone();
    ad.B = a.at(ad.target + ".B").clone();
    auto it = std::find_if(sites.begin(), sites.end(), [&](const ProjectionSite& s) { return s.id == ad.target; });
    if (it == sites.end() || ad.A.size(0) != it->out_features || ad.B.size(1) != it->in_features) {
      throw ValidationError(path.string() + ": adapter '" + ad.target + "' does not fit the backend");
    }
    out.insert(std::move(ad));
  }
  return out;
}

}  // namespace dermaug
