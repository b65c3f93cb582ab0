#include "dermaug/concept_inversion.hpp"

#include <cmath>

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "dermaug/tensor_archive.hpp"

namespace dermaug {

namespace {

constexpr const char* kConceptKind = "concepts";
constexpr int kConceptVersion = 1;

}  // namespace

std::string concept_token(Condition condition) {
  return "<cond-" + std::string(condition_slug(condition)) + ">";
}

void InversionConfig::validate() const {
  if (steps < 0) throw ValidationError("inversion: steps must be >= 0");
  if (!(lr > 0)) throw ValidationError("inversion: lr must be > 0");
  if (batch_size < 1) throw ValidationError("inversion: batch_size must be >= 1");
  if (prompt_template.find("{concept}") == std::string::npos) {
    throw ValidationError("inversion: prompt template needs a {concept} slot");
  }
}

void to_json(nlohmann::json& j, const InversionConfig& c) {
  j = {{"steps", c.steps},
       {"lr", c.lr},
       {"batch_size", c.batch_size},
       {"init_word", c.init_word},
       {"prompt_template", c.prompt_template},
       {"seed", c.seed},
       {"include_all_groups", c.include_all_groups},
       {"flip_augment", c.flip_augment}};
}

void from_json(const nlohmann::json& j, InversionConfig& c) {
  InversionConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.init_word = j.value("init_word", d.init_word);
  c.prompt_template = j.value("prompt_template", d.prompt_template);
  c.seed = j.value("seed", d.seed);
  c.include_all_groups = j.value("include_all_groups", d.include_all_groups);
  c.flip_augment = j.value("flip_augment", d.flip_augment);
}

ConceptEmbedding register_concept(DiffusionBackend& backend, const std::string& token,
                                  const std::string& init_word, Condition condition) {
  auto row = backend.register_placeholder(token, init_word);
  ConceptEmbedding embedding;
  embedding.token = token;
  embedding.init_word = init_word;
  embedding.condition = condition;
  embedding.vector = row.detach().clone();
  return embedding;
}

ConceptEmbedding train_textual_inversion(const DatasetManifest& images, ConceptEmbedding embedding,
                                         DiffusionBackend& backend, const InversionConfig& config,
                                         ImageStore& store) {
  config.validate();
  if (images.empty()) throw ValidationError("inversion of " + embedding.token + ": empty image set");
  for (const auto& r : images.records) {
    if (r.condition != embedding.condition) {
      throw ValidationError("inversion of " + embedding.token + ": image '" + r.id + "' has another condition");
    }
  }
  const auto prompt = fill_slot(config.prompt_template, "concept", embedding.token);
  const int size = static_cast<int>(backend.geometry().image_size);

  std::vector<std::filesystem::path> paths;
  for (const auto& r : images.records) paths.push_back(r.image_path);
  torch::Tensor latents;
  {
    torch::NoGradGuard no_grad;
    auto batch = store.load_batch(paths, size);
    latents = backend.encode(batch);
    if (config.flip_augment) latents = torch::cat({latents, backend.encode(batch.flip({3}))}, 0);
  }

  auto row = backend.placeholder(embedding.token);
  auto gen = make_generator(derive_seed(config.seed, "textual-inversion"));
  embedding.meta = {};
  embedding.meta.steps = config.steps;
  embedding.meta.lr = config.lr;
  embedding.meta.n_images = images.size();
  embedding.meta.seed = config.seed;
  if (config.steps > 0) {
    row.requires_grad_(true);
    torch::optim::Adam opt(std::vector<torch::Tensor>{row}, torch::optim::AdamOptions(config.lr));
    const std::vector<std::string> prompts(static_cast<std::size_t>(config.batch_size), prompt);
    for (int step = 0; step < config.steps; ++step) {
      auto idx = torch::randint(0, latents.size(0), {config.batch_size}, gen, torch::kLong);
      auto loss = ldm_loss_latents(latents.index_select(0, idx), prompts, backend, nullptr, gen);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        row.requires_grad_(false);
        throw StageError("inversion of " + embedding.token + ": non-finite loss at step " + std::to_string(step));
      }
      embedding.meta.loss_curve.push_back(value);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    row.requires_grad_(false);
    row.mutable_grad() = torch::Tensor();
    embedding.meta.final_loss = embedding.meta.loss_curve.back();
  }
  embedding.vector = row.detach().clone();
  return embedding;
}

ConceptSet invert_all_concepts(const DatasetManifest& train, DiffusionBackend& backend,
                               const InversionConfig& config, ImageStore& store) {
  config.validate();
  ConceptSet out;
  for (auto condition : kAllConditions) {
    auto images = train.filter(condition);
    if (!config.include_all_groups) {
      auto light = images.filter(SkinGroup::Light);
      if (!light.empty()) images = std::move(light);
    }
    if (images.empty()) {
      throw ValidationError("inversion: no training images for condition '" +
                            std::string(condition_name(condition)) + "'");
    }
  }
  for (auto condition : kAllConditions) {
    auto images = train.filter(condition);
    if (!config.include_all_groups) {
      auto light = images.filter(SkinGroup::Light);
      if (!light.empty()) images = std::move(light);
    }
    auto embedding = register_concept(backend, concept_token(condition), config.init_word, condition);
    out[condition] = train_textual_inversion(images, std::move(embedding), backend, config, store);
  }
  return out;
}

ConceptTokens concept_tokens(const ConceptSet& concepts) {
  ConceptTokens out;
  for (const auto& [condition, c] : concepts) out[condition] = c.token;
  return out;
}

void install_concepts(DiffusionBackend& backend, const ConceptSet& concepts) {
  const auto existing = backend.placeholder_tokens();
  for (const auto& [condition, c] : concepts) {
    if (std::find(existing.begin(), existing.end(), c.token) == existing.end()) {
      backend.register_placeholder(c.token, c.init_word);
    }
    auto row = backend.placeholder(c.token);
    if (row.sizes() != c.vector.sizes()) {
      throw ValidationError("concept " + c.token + " has dimension " + std::to_string(c.vector.numel()) +
                            "; the backend expects " + std::to_string(row.numel()));
    }
    torch::NoGradGuard no_grad;
    row.copy_(c.vector);
  }
}

void save_concepts(const std::filesystem::path& path, const ConceptSet& concepts) {
  TensorArchive a;
  a.kind = kConceptKind;
  a.format_version = kConceptVersion;
  a.meta = {{"concepts", nlohmann::json::array()}};
  for (const auto& [condition, c] : concepts) {
    a.meta["concepts"].push_back({{"token", c.token},
                                  {"init_word", c.init_word},
                                  {"condition", condition_name(condition)},
                                  {"dim", c.vector.numel()},
                                  {"training_meta",
                                   {{"steps", c.meta.steps},
                                    {"lr", c.meta.lr},
                                    {"final_loss", c.meta.final_loss},
                                    {"n_images", c.meta.n_images},
                                    {"seed", c.meta.seed},
                                    {"loss_curve", c.meta.loss_curve}}}});
    a.tensors.emplace_back(c.token, c.vector);
  }
  write_archive(path, a);
}

ConceptSet load_concepts(const std::filesystem::path& path) {
  const auto a = read_archive(path, kConceptKind, kConceptVersion);
  ConceptSet out;
  for (const auto& entry : a.meta.at("concepts")) {
    ConceptEmbedding c;
    c.token = entry.at("token").get<std::string>();
    c.init_word = entry.at("init_word").get<std::string>();
    auto condition = parse_condition(entry.at("condition").get<std::string>());
    if (!condition) throw ValidationError(path.string() + ": unknown condition in concept file");
    c.condition = *condition;
    c.vector = a.at(c.token).clone();
    const auto& m = entry.at("training_meta");
    c.meta.steps = m.value("steps", 0);
    c.meta.lr = m.value("lr", 0.0);
    c.meta.final_loss = m.value("final_loss", 0.0);
    c.meta.n_images = m.value("n_images", std::size_t{0});
    c.meta.seed = m.value("seed", std::uint64_t{0});
    c.meta.loss_curve = m.value("loss_curve", std::vector<double>{});
    out[c.condition] = std::move(c);
  }
  return out;
}

}  // namespace dermaug
