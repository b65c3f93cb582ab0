#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "dermaug/hashing.hpp"
#include "dermaug/layers.hpp"

namespace dermaug {

/// Word-level vocabulary; ids 0..2 are the <pad>, <bos> and <eos> sentinels.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  /// Returns the existing id when the token is already present.
  std::int64_t add(const std::string& token);
  std::optional<std::int64_t> id(std::string_view token) const;
  const std::string& token(std::int64_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

/// Lower-cases words and drops surrounding punctuation; `<...>` tokens are kept verbatim.
std::vector<std::string> tokenize(std::string_view prompt);

struct TextEncoderConfig {
  std::int64_t dim = 32;
  std::int64_t max_len = 16;
  std::int64_t heads = 4;
};

/// Maps prompts to conditioning sequences [B, max_len, dim].
///
/// Base vocabulary rows live in a frozen embedding table. Placeholder tokens get
/// their own rows outside the table so optimizing one never touches the rest.
class ConditioningEncoderImpl : public torch::nn::Module {
 public:
  ConditioningEncoderImpl(Vocabulary vocab, TextEncoderConfig config);

  torch::Tensor forward(const std::vector<std::string>& prompts, const LoraSet* lora = nullptr) const;

  /// Token ids for one prompt: <bos> tokens <eos> <pad>..., length max_len.
  /// Throws ValidationError on unknown tokens or an over-long prompt.
  std::vector<std::int64_t> token_ids(std::string_view prompt) const;

  /// Appends a placeholder row initialized to a copy of `init_word`'s row and
  /// returns that row (shared storage: later updates are visible to encode).
  torch::Tensor register_placeholder(const std::string& token, const std::string& init_word);
  bool has_placeholder(std::string_view token) const;
  torch::Tensor placeholder(std::string_view token) const;
  std::vector<std::string> placeholder_tokens() const;
  void clear_placeholders();

  bool knows(std::string_view token) const;
  const Vocabulary& vocabulary() const { return vocab_; }
  const TextEncoderConfig& config() const { return config_; }

  torch::Tensor token_embedding;
  torch::Tensor position_embedding;
  torch::nn::LayerNorm ln_attn{nullptr}, ln_mlp{nullptr}, ln_out{nullptr};
  Attention attn{nullptr};
  torch::nn::Linear mlp_in{nullptr}, mlp_out{nullptr};

 private:
  Vocabulary vocab_;
  TextEncoderConfig config_;
  std::vector<std::pair<std::string, torch::Tensor>> placeholders_;
};
TORCH_MODULE(ConditioningEncoder);

}  // namespace dermaug
