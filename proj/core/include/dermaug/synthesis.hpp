#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dermaug/backend.hpp"
#include "dermaug/corpus.hpp"
#include "dermaug/image_io.hpp"

namespace dermaug {

struct PromptTemplate {
  std::string training_template = "An image of {concept}";
  std::string generation_template = "An image of {concept} on {skin_phrase}";
  std::string light_phrase = "light skin";
  std::string dark_phrase = "dark skin";

  /// Throws unless the training template has {concept} and the generation
  /// template has both {concept} and {skin_phrase}.
  void validate() const;
  std::string skin_phrase(SkinGroup group) const;
};
void to_json(nlohmann::json& j, const PromptTemplate& t);
void from_json(const nlohmann::json& j, PromptTemplate& t);

/// Word substituted for {concept}, per condition: a placeholder token such as
/// `<cond-psoriasis>`, or the plain condition name for strategies without inversion.
using ConceptTokens = std::map<Condition, std::string>;

/// Plain condition names for every condition.
ConceptTokens plain_concept_words();

/// Replaces every `{slot}` occurrence in `text`.
std::string fill_slot(std::string text, const std::string& slot, const std::string& value);

std::string build_prompt(Condition condition, SkinGroup target_group, const ConceptTokens& concepts,
                         const PromptTemplate& tmpl = {});
std::string build_training_prompt(Condition condition, const ConceptTokens& concepts,
                                  const PromptTemplate& tmpl = {});

enum class GenerationMode { Txt2Img, Img2Img };
std::string_view mode_name(GenerationMode m);
GenerationMode parse_mode(std::string_view text);

struct GenerationConfig {
  GenerationMode mode = GenerationMode::Img2Img;
  double strength = 0.7;
  double guidance_scale = 7.5;
  int inference_steps = 50;
  std::uint64_t seed = 0;
  int n_per_real = 5;
  SkinGroup target_group = SkinGroup::Dark;
  bool ancestral = false;
  int batch_size = 32;

  void validate() const;
};
void to_json(nlohmann::json& j, const GenerationConfig& c);
void from_json(const nlohmann::json& j, GenerationConfig& c);

/// Schedule times visited by an S-step sampler: tau_k = round(k T / S), k = 0..S.
std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, int steps);

/// img2img entry index: round(strength * steps).
int img2img_start_index(double strength, int steps);

struct SamplerOptions {
  double guidance_scale = 7.5;
  int inference_steps = 50;
  bool ancestral = false;
  /// When false only the conditional branch is evaluated (no guidance step).
  bool combine_guidance = true;
};

/// Runs the reverse chain from index `start_index` down to 0. `generators`
/// holds one RNG per sample (used only by ancestral steps).
torch::Tensor reverse_trajectory(const DiffusionBackend& backend, torch::Tensor z, int start_index,
                                 const std::vector<std::string>& prompts, const LoraSet* lora,
                                 const SamplerOptions& options, std::vector<at::Generator>& generators);

/// Full reverse diffusion from seeded Gaussian latents; one seed per prompt.
torch::Tensor txt2img(const DiffusionBackend& backend, const std::vector<std::string>& prompts,
                      const std::vector<std::uint64_t>& seeds, const GenerationConfig& config,
                      const LoraSet* lora = nullptr);

/// Encodes references, noises them to tau_{round(strength S)} with seeded noise,
/// then denoises under the prompts. strength in (0, 1]; a start index of 0 returns D(E(x)).
torch::Tensor img2img(const DiffusionBackend& backend, const torch::Tensor& references,
                      const std::vector<std::string>& prompts, const std::vector<std::uint64_t>& seeds,
                      double strength, const GenerationConfig& config, const LoraSet* lora = nullptr);

/// Seed of replica `replica` generated from reference `source_id`.
std::uint64_t synthetic_seed(std::uint64_t master, const std::string& source_id, int replica);

struct SyntheticRecord {
  ImageRecord record;
  std::string source_id;  // empty for txt2img
  std::string gen_fingerprint;
  int replica = 0;
};

struct SyntheticCorpus {
  std::string source_id;
  std::vector<SyntheticRecord> records;

  DatasetManifest manifest() const;
};

/// Identifies everything a generated corpus depends on.
std::string generation_fingerprint(const DiffusionBackend& backend, const LoraSet* lora,
                                   const ConceptTokens& concepts, const GenerationConfig& config,
                                   const PromptTemplate& tmpl);

/// Mirrors FST across the spectrum (I<->VI, II<->V) unless it already lies in `target`.
Fst target_fst(Fst reference, SkinGroup target);

/// n_per_real generations per real training image, labelled with the reference's
/// condition and `config.target_group`; PNGs and `manifest.csv` go under out_dir.
SyntheticCorpus synthesize_corpus(const DatasetManifest& train, const DiffusionBackend& backend,
                                  const LoraSet* lora, const ConceptTokens& concepts,
                                  const GenerationConfig& config, const PromptTemplate& tmpl,
                                  ImageStore& store, const std::filesystem::path& out_dir);

SyntheticCorpus synthesize_corpus(const ScenarioSplit& split, const DiffusionBackend& backend,
                                  const LoraSet* lora, const ConceptTokens& concepts,
                                  const GenerationConfig& config, const PromptTemplate& tmpl,
                                  ImageStore& store, const std::filesystem::path& out_dir);

/// CSV: id,image_path,condition,fst,source_id,gen_fingerprint.
void save_synthetic_manifest(const SyntheticCorpus& corpus, const std::filesystem::path& path);
SyntheticCorpus load_synthetic_manifest(const std::filesystem::path& path);

}  // namespace dermaug
