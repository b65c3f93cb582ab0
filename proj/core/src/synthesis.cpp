#include "dermaug/synthesis.hpp"

#include <cmath>
#include <fstream>

#include "dermaug/csv.hpp"
#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"

namespace dermaug {

namespace {

const std::vector<std::string> kSyntheticHeader{"id", "image_path", "condition", "fst", "source_id",
                                                "gen_fingerprint"};

bool has_slot(const std::string& text, const std::string& slot) {
  return text.find("{" + slot + "}") != std::string::npos;
}

torch::Tensor gaussian_like(const std::vector<at::Generator>& gens, std::vector<std::int64_t> sample_shape) {
  std::vector<torch::Tensor> parts;
  parts.reserve(gens.size());
  for (auto g : gens) parts.push_back(torch::randn(sample_shape, g));
  return torch::stack(parts);
}

std::vector<at::Generator> generators_for(const std::vector<std::uint64_t>& seeds) {
  std::vector<at::Generator> gens;
  gens.reserve(seeds.size());
  for (auto s : seeds) gens.push_back(make_generator(s));
  return gens;
}

}  // namespace

void PromptTemplate::validate() const {
  if (!has_slot(training_template, "concept")) {
    throw ValidationError("training template needs a {concept} slot: '" + training_template + "'");
  }
  if (!has_slot(generation_template, "concept") || !has_slot(generation_template, "skin_phrase")) {
    throw ValidationError("generation template needs {concept} and {skin_phrase} slots: '" +
                          generation_template + "'");
  }
}

std::string PromptTemplate::skin_phrase(SkinGroup group) const {
  return group == SkinGroup::Light ? light_phrase : dark_phrase;
}

void to_json(nlohmann::json& j, const PromptTemplate& t) {
  j = {{"training_template", t.training_template},
       {"generation_template", t.generation_template},
       {"light_phrase", t.light_phrase},
       {"dark_phrase", t.dark_phrase}};
}

void from_json(const nlohmann::json& j, PromptTemplate& t) {
  PromptTemplate d;
  t.training_template = j.value("training_template", d.training_template);
  t.generation_template = j.value("generation_template", d.generation_template);
  t.light_phrase = j.value("light_phrase", d.light_phrase);
  t.dark_phrase = j.value("dark_phrase", d.dark_phrase);
}

ConceptTokens plain_concept_words() {
  ConceptTokens out;
  for (auto c : kAllConditions) out[c] = std::string(condition_name(c));
  return out;
}

std::string fill_slot(std::string text, const std::string& slot, const std::string& value) {
  const std::string key = "{" + slot + "}";
  for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size())) {
    text.replace(pos, key.size(), value);
  }
  return text;
}

std::string build_prompt(Condition condition, SkinGroup target_group, const ConceptTokens& concepts,
                         const PromptTemplate& tmpl) {
  tmpl.validate();
  auto it = concepts.find(condition);
  if (it == concepts.end()) {
    throw ValidationError("no concept for condition '" + std::string(condition_name(condition)) + "'");
  }
  return fill_slot(fill_slot(tmpl.generation_template, "concept", it->second), "skin_phrase",
                   tmpl.skin_phrase(target_group));
}

std::string build_training_prompt(Condition condition, const ConceptTokens& concepts,
                                  const PromptTemplate& tmpl) {
  tmpl.validate();
  auto it = concepts.find(condition);
  if (it == concepts.end()) {
    throw ValidationError("no concept for condition '" + std::string(condition_name(condition)) + "'");
  }
  return fill_slot(tmpl.training_template, "concept", it->second);
}

std::string_view mode_name(GenerationMode m) { return m == GenerationMode::Txt2Img ? "txt2img" : "img2img"; }

GenerationMode parse_mode(std::string_view text) {
  if (text == "txt2img") return GenerationMode::Txt2Img;
  if (text == "img2img") return GenerationMode::Img2Img;
  throw ValidationError("unknown generation mode '" + std::string(text) + "'");
}

void GenerationConfig::validate() const {
  if (mode == GenerationMode::Img2Img && !(strength > 0.0 && strength <= 1.0)) {
    throw ValidationError("img2img strength must lie in (0, 1]");
  }
  if (!(guidance_scale >= 1.0)) throw ValidationError("guidance_scale must be >= 1");
  if (inference_steps < 1) throw ValidationError("inference_steps must be >= 1");
  if (n_per_real < 1) throw ValidationError("n_per_real must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const GenerationConfig& c) {
  j = {{"mode", mode_name(c.mode)},
       {"guidance_scale", c.guidance_scale},
       {"inference_steps", c.inference_steps},
       {"seed", c.seed},
       {"n_per_real", c.n_per_real},
       {"target_group", group_name(c.target_group)},
       {"ancestral", c.ancestral},
       {"batch_size", c.batch_size}};
  if (c.mode == GenerationMode::Img2Img) j["strength"] = c.strength;
}

void from_json(const nlohmann::json& j, GenerationConfig& c) {
  GenerationConfig d;
  c.mode = parse_mode(j.value("mode", std::string(mode_name(d.mode))));
  c.strength = j.value("strength", d.strength);
  c.guidance_scale = j.value("guidance_scale", d.guidance_scale);
  c.inference_steps = j.value("inference_steps", d.inference_steps);
  c.seed = j.value("seed", d.seed);
  c.n_per_real = j.value("n_per_real", d.n_per_real);
  const auto group = parse_group(j.value("target_group", std::string(group_name(d.target_group))));
  if (!group) throw ValidationError("target_group must be light or dark");
  c.target_group = *group;
  c.ancestral = j.value("ancestral", d.ancestral);
  c.batch_size = j.value("batch_size", d.batch_size);
}

std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, int steps) {
  if (steps < 1) throw ValidationError("sampler needs at least one step");
  std::vector<int> taus(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    taus[static_cast<std::size_t>(k)] =
        static_cast<int>(std::lround(static_cast<double>(k) * schedule.steps / steps));
  }
  return taus;
}

int img2img_start_index(double strength, int steps) {
  return static_cast<int>(std::lround(strength * steps));
}

torch::Tensor reverse_trajectory(const DiffusionBackend& backend, torch::Tensor z, int start_index,
                                 const std::vector<std::string>& prompts, const LoraSet* lora,
                                 const SamplerOptions& options, std::vector<at::Generator>& generators) {
  torch::NoGradGuard no_grad;
  const auto& schedule = backend.schedule();
  const auto taus = sampling_timesteps(schedule, options.inference_steps);
  if (start_index < 0 || start_index > options.inference_steps) {
    throw ValidationError("reverse trajectory start index out of range");
  }
  const auto b = z.size(0);
  if (static_cast<std::int64_t>(prompts.size()) != b) throw ValidationError("one prompt per latent required");
  if (options.ancestral && static_cast<std::int64_t>(generators.size()) != b) {
    throw ValidationError("ancestral sampling needs one generator per latent");
  }
  if (start_index == 0) return z;
  const auto cond = backend.encode_prompt(prompts, lora);
  torch::Tensor both_ctx;
  if (options.combine_guidance) {
    const auto uncond = backend.encode_prompt(std::vector<std::string>(prompts.size()), lora);
    both_ctx = torch::cat({cond, uncond}, 0);
  }
  const std::vector<std::int64_t> sample_shape(z.sizes().begin() + 1, z.sizes().end());
  for (int k = start_index; k >= 1; --k) {
    const int t = taus[static_cast<std::size_t>(k)];
    const int t_prev = taus[static_cast<std::size_t>(k - 1)];
    if (t == t_prev) continue;
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    torch::Tensor eps;
    if (options.combine_guidance) {
      auto tt = torch::full({2 * b}, t, torch::kLong);
      auto out = backend.predict_eps(torch::cat({z, z}, 0), tt, both_ctx, lora);
      auto eps_c = out.slice(0, 0, b);
      auto eps_u = out.slice(0, b, 2 * b);
      eps = eps_u + options.guidance_scale * (eps_c - eps_u);
    } else {
      eps = backend.predict_eps(z, torch::full({b}, t, torch::kLong), cond, lora);
    }
    auto x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (options.ancestral && t_prev > 0) {
      const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
      const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
      z = std::sqrt(ab_prev) * x0 + dir * eps + sigma * gaussian_like(generators, sample_shape);
    } else {
      z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
    }
  }
  return z;
}

torch::Tensor txt2img(const DiffusionBackend& backend, const std::vector<std::string>& prompts,
                      const std::vector<std::uint64_t>& seeds, const GenerationConfig& config,
                      const LoraSet* lora) {
  GenerationConfig c = config;
  c.mode = GenerationMode::Txt2Img;
  c.validate();
  if (prompts.size() != seeds.size()) throw ValidationError("txt2img: one seed per prompt required");
  torch::NoGradGuard no_grad;
  const auto& g = backend.geometry();
  auto gens = generators_for(seeds);
  auto z = gaussian_like(gens, {g.latent_channels, g.latent_size, g.latent_size});
  SamplerOptions o{c.guidance_scale, c.inference_steps, c.ancestral, true};
  z = reverse_trajectory(backend, z, c.inference_steps, prompts, lora, o, gens);
  return backend.decode(z).clamp(0.0, 1.0);
}

torch::Tensor img2img(const DiffusionBackend& backend, const torch::Tensor& references,
                      const std::vector<std::string>& prompts, const std::vector<std::uint64_t>& seeds,
                      double strength, const GenerationConfig& config, const LoraSet* lora) {
  GenerationConfig c = config;
  c.mode = GenerationMode::Img2Img;
  c.strength = strength;
  c.validate();
  if (prompts.size() != seeds.size() || static_cast<std::int64_t>(seeds.size()) != references.size(0)) {
    throw ValidationError("img2img: one prompt and one seed per reference required");
  }
  torch::NoGradGuard no_grad;
  auto z0 = backend.encode(references);
  const int start = img2img_start_index(strength, c.inference_steps);
  if (start == 0) return backend.decode(z0).clamp(0.0, 1.0);
  const int t_start = sampling_timesteps(backend.schedule(), c.inference_steps)[static_cast<std::size_t>(start)];
  auto gens = generators_for(seeds);
  const std::vector<std::int64_t> sample_shape(z0.sizes().begin() + 1, z0.sizes().end());
  auto z = forward_diffuse(z0, gaussian_like(gens, sample_shape), backend.schedule().alpha_bar(t_start));
  SamplerOptions o{c.guidance_scale, c.inference_steps, c.ancestral, true};
  z = reverse_trajectory(backend, z, start, prompts, lora, o, gens);
  return backend.decode(z).clamp(0.0, 1.0);
}

std::uint64_t synthetic_seed(std::uint64_t master, const std::string& source_id, int replica) {
  return derive_seed(master, source_id, static_cast<std::uint64_t>(replica));
}

DatasetManifest SyntheticCorpus::manifest() const {
  DatasetManifest m;
  m.source_id = source_id;
  m.records.reserve(records.size());
  for (const auto& r : records) m.records.push_back(r.record);
  return m;
}

std::string generation_fingerprint(const DiffusionBackend& backend, const LoraSet* lora,
                                   const ConceptTokens& concepts, const GenerationConfig& config,
                                   const PromptTemplate& tmpl) {
  nlohmann::json concept_json = nlohmann::json::object();
  NamedTensors vectors;
  for (const auto& [condition, word] : concepts) {
    concept_json[std::string(condition_slug(condition))] = word;
    if (backend.knows_token(word) && word.size() > 2 && word.front() == '<') {
      vectors.emplace_back(word, backend.placeholder(word));
    }
  }
  nlohmann::json j = {{"backend", backend.fingerprint()},
                      {"lora", lora_digest(lora)},
                      {"concepts", concept_json},
                      {"concept_vectors", tensor_digest(vectors)},
                      {"config", config},
                      {"template", tmpl}};
  return sha256_hex(j.dump());
}

Fst target_fst(Fst reference, SkinGroup target) {
  if (group_of(reference) == target) return reference;
  switch (reference) {
    case Fst::I: return Fst::VI;
    case Fst::II: return Fst::V;
    case Fst::V: return Fst::II;
    case Fst::VI: return Fst::I;
  }
  return reference;
}

SyntheticCorpus synthesize_corpus(const DatasetManifest& train, const DiffusionBackend& backend,
                                  const LoraSet* lora, const ConceptTokens& concepts,
                                  const GenerationConfig& config, const PromptTemplate& tmpl,
                                  ImageStore& store, const std::filesystem::path& out_dir) {
  config.validate();
  tmpl.validate();
  for (const auto& r : train.records) build_prompt(r.condition, config.target_group, concepts, tmpl);
  const auto fingerprint = generation_fingerprint(backend, lora, concepts, config, tmpl);
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);

  struct Job {
    const ImageRecord* ref;
    int replica;
  };
  std::vector<Job> jobs;
  jobs.reserve(train.size() * static_cast<std::size_t>(config.n_per_real));
  for (const auto& r : train.records) {
    for (int k = 0; k < config.n_per_real; ++k) jobs.push_back({&r, k});
  }

  SyntheticCorpus corpus;
  corpus.source_id = "synthetic-" + fingerprint.substr(0, 12);
  corpus.records.reserve(jobs.size());
  const int size = static_cast<int>(backend.geometry().image_size);
  for (std::size_t start = 0; start < jobs.size(); start += static_cast<std::size_t>(config.batch_size)) {
    const auto end = std::min(jobs.size(), start + static_cast<std::size_t>(config.batch_size));
    std::vector<std::string> prompts;
    std::vector<std::uint64_t> seeds;
    std::vector<torch::Tensor> refs;
    for (auto i = start; i < end; ++i) {
      const auto& job = jobs[i];
      prompts.push_back(build_prompt(job.ref->condition, config.target_group, concepts, tmpl));
      seeds.push_back(synthetic_seed(config.seed, job.ref->id, job.replica));
      if (config.mode == GenerationMode::Img2Img) refs.push_back(store.load(job.ref->image_path, size));
    }
    const auto images = config.mode == GenerationMode::Img2Img
                            ? img2img(backend, torch::stack(refs), prompts, seeds, config.strength, config, lora)
                            : txt2img(backend, prompts, seeds, config, lora);
    for (auto i = start; i < end; ++i) {
      const auto& job = jobs[i];
      SyntheticRecord rec;
      rec.record.id = "syn-" + job.ref->id + "-r" + std::to_string(job.replica);
      rec.record.image_path = image_dir / (rec.record.id + ".png");
      rec.record.condition = job.ref->condition;
      rec.record.fst = target_fst(job.ref->fst, config.target_group);
      rec.source_id = config.mode == GenerationMode::Img2Img ? job.ref->id : std::string();
      rec.gen_fingerprint = fingerprint;
      rec.replica = job.replica;
      write_png(rec.record.image_path, images[static_cast<std::int64_t>(i - start)]);
      corpus.records.push_back(std::move(rec));
    }
  }
  save_synthetic_manifest(corpus, out_dir / "manifest.csv");
  return corpus;
}

SyntheticCorpus synthesize_corpus(const ScenarioSplit& split, const DiffusionBackend& backend,
                                  const LoraSet* lora, const ConceptTokens& concepts,
                                  const GenerationConfig& config, const PromptTemplate& tmpl,
                                  ImageStore& store, const std::filesystem::path& out_dir) {
  return synthesize_corpus(split.train, backend, lora, concepts, config, tmpl, store, out_dir);
}

void save_synthetic_manifest(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write synthetic manifest " + path.string());
  const auto base = std::filesystem::absolute(path).parent_path().lexically_normal();
  out << csv::join(kSyntheticHeader) << '\n';
  for (const auto& r : corpus.records) {
    auto rel = std::filesystem::absolute(r.record.image_path).lexically_normal().lexically_relative(base);
    const bool beneath = !rel.empty() && rel.begin()->string() != "..";
    out << csv::join({r.record.id, beneath ? rel.string() : r.record.image_path.string(),
                      std::string(condition_name(r.record.condition)), std::string(fst_name(r.record.fst)),
                      r.source_id, r.gen_fingerprint})
        << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

SyntheticCorpus load_synthetic_manifest(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  if (table.header != kSyntheticHeader) {
    throw ValidationError(path.string() +
                          ": header must be exactly id,image_path,condition,fst,source_id,gen_fingerprint");
  }
  SyntheticCorpus corpus;
  corpus.source_id = path.parent_path().filename().string();
  const auto base = path.parent_path();
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::string where = path.string() + ":" + std::to_string(table.line_numbers[i]);
    if (row.size() != kSyntheticHeader.size()) throw ValidationError(where + ": expected 6 fields");
    auto condition = parse_condition(row[2]);
    if (!condition) throw ValidationError(where + ": unknown condition '" + row[2] + "'");
    auto fst = parse_fst(row[3]);
    if (!fst) throw ValidationError(where + ": fst outside supported ends of spectrum");
    SyntheticRecord r;
    std::filesystem::path image = row[1];
    if (image.is_relative() && !base.empty()) image = base / image;
    r.record = {row[0], image.lexically_normal(), *condition, *fst};
    r.source_id = row[4];
    r.gen_fingerprint = row[5];
    const auto pos = r.record.id.rfind("-r");
    if (pos != std::string::npos) r.replica = std::atoi(r.record.id.c_str() + pos + 2);
    corpus.records.push_back(std::move(r));
  }
  corpus.manifest().validate_unique_ids();
  return corpus;
}

}  // namespace dermaug
