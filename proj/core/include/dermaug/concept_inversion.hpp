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
#include "dermaug/synthesis.hpp"

namespace dermaug {

struct InversionMeta {
  int steps = 0;
  double lr = 0.0;
  double final_loss = 0.0;
  std::size_t n_images = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_curve;
};

/// Learned vector bound to a placeholder token such as `<cond-psoriasis>`.
struct ConceptEmbedding {
  std::string token;
  std::string init_word;
  Condition condition = Condition::BasalCellCarcinoma;
  torch::Tensor vector;  // [d], detached copy of the placeholder row
  InversionMeta meta;
};

using ConceptSet = std::map<Condition, ConceptEmbedding>;

/// `<cond-<slug>>`.
std::string concept_token(Condition condition);

struct InversionConfig {
  int steps = 1000;
  double lr = 5e-3;
  int batch_size = 8;
  std::string init_word = "rash";
  /// Must contain `{concept}`.
  std::string prompt_template = "An image of {concept}";
  std::uint64_t seed = 0;
  /// Use the condition's images from both skin groups; false keeps light only.
  bool include_all_groups = true;
  bool flip_augment = true;

  void validate() const;
};
void to_json(nlohmann::json& j, const InversionConfig& c);
void from_json(const nlohmann::json& j, InversionConfig& c);

/// Adds the placeholder row to the backend, initialized to a copy of init_word's row.
ConceptEmbedding register_concept(DiffusionBackend& backend, const std::string& token,
                                  const std::string& init_word, Condition condition);

/// Optimizes only the concept placeholder row against the latent diffusion
/// loss with prompts built from `config.prompt_template`. Batches and noise come
/// from an RNG seeded by `config.seed` alone. Throws StageError on a non-finite loss.
ConceptEmbedding train_textual_inversion(const DatasetManifest& images, ConceptEmbedding embedding,
                                         DiffusionBackend& backend, const InversionConfig& config,
                                         ImageStore& store);

/// One concept per condition, each trained on that condition's images only.
ConceptSet invert_all_concepts(const DatasetManifest& train, DiffusionBackend& backend,
                               const InversionConfig& config, ImageStore& store);

/// Token per condition, for prompt building.
ConceptTokens concept_tokens(const ConceptSet& concepts);

/// Registers (or overwrites) every concept placeholder row in the backend.
void install_concepts(DiffusionBackend& backend, const ConceptSet& concepts);

/// JSON header (token, init_word, dim, condition, training_meta) + binary vectors.
void save_concepts(const std::filesystem::path& path, const ConceptSet& concepts);
ConceptSet load_concepts(const std::filesystem::path& path);

}  // namespace dermaug
