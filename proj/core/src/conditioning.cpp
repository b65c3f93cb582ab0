#include "dermaug/conditioning.hpp"

#include <algorithm>
#include <cctype>

#include "dermaug/error.hpp"

namespace dermaug {

Vocabulary::Vocabulary() {
  add(std::string(kPad));
  add(std::string(kBos));
  add(std::string(kEos));
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

std::int64_t Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const auto id = static_cast<std::int64_t>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::optional<std::int64_t> Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> tokenize(std::string_view prompt) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < prompt.size()) {
    while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
    if (i >= prompt.size()) break;
    std::size_t j = i;
    while (j < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[j]))) ++j;
    std::string word(prompt.substr(i, j - i));
    i = j;
    if (word.size() >= 2 && word.front() == '<' && word.back() == '>') {
      out.push_back(std::move(word));
      continue;
    }
    auto is_punct = [](unsigned char c) { return std::ispunct(c) && c != '-' && c != '<' && c != '>'; };
    while (!word.empty() && is_punct(static_cast<unsigned char>(word.back()))) word.pop_back();
    while (!word.empty() && is_punct(static_cast<unsigned char>(word.front()))) word.erase(0, 1);
    if (word.size() >= 2 && word.front() == '<' && word.back() == '>') {
      out.push_back(std::move(word));
      continue;
    }
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (!word.empty()) out.push_back(std::move(word));
  }
  return out;
}

ConditioningEncoderImpl::ConditioningEncoderImpl(Vocabulary vocab, TextEncoderConfig config)
    : vocab_(std::move(vocab)), config_(config) {
  token_embedding =
      register_parameter("token_embedding", torch::randn({vocab_.size(), config_.dim}) * 0.5);
  position_embedding =
      register_parameter("position_embedding", torch::randn({config_.max_len, config_.dim}) * 0.1);
  ln_attn = register_module("ln_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.dim})));
  attn = register_module("attn", Attention("text.attn", config_.dim, config_.dim, config_.heads));
  ln_mlp = register_module("ln_mlp", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.dim})));
  mlp_in = register_module("mlp_in", torch::nn::Linear(config_.dim, 2 * config_.dim));
  mlp_out = register_module("mlp_out", torch::nn::Linear(2 * config_.dim, config_.dim));
  ln_out = register_module("ln_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.dim})));
}

bool ConditioningEncoderImpl::knows(std::string_view token) const {
  return vocab_.id(token).has_value() || has_placeholder(token);
}

std::vector<std::int64_t> ConditioningEncoderImpl::token_ids(std::string_view prompt) const {
  const auto words = tokenize(prompt);
  if (static_cast<std::int64_t>(words.size()) + 2 > config_.max_len) {
    throw ValidationError("prompt has " + std::to_string(words.size()) + " tokens; at most " +
                          std::to_string(config_.max_len - 2) + " fit: '" + std::string(prompt) + "'");
  }
  std::vector<std::int64_t> ids;
  ids.reserve(static_cast<std::size_t>(config_.max_len));
  ids.push_back(*vocab_.id(Vocabulary::kBos));
  for (const auto& w : words) {
    if (auto id = vocab_.id(w)) {
      ids.push_back(*id);
      continue;
    }
    auto it = std::find_if(placeholders_.begin(), placeholders_.end(),
                           [&](const auto& p) { return p.first == w; });
    if (it == placeholders_.end()) {
      throw ValidationError("unknown token '" + w + "' in prompt '" + std::string(prompt) + "'");
    }
    ids.push_back(vocab_.size() + (it - placeholders_.begin()));
  }
  ids.push_back(*vocab_.id(Vocabulary::kEos));
  while (static_cast<std::int64_t>(ids.size()) < config_.max_len) ids.push_back(*vocab_.id(Vocabulary::kPad));
  return ids;
}

torch::Tensor ConditioningEncoderImpl::forward(const std::vector<std::string>& prompts,
                                               const LoraSet* lora) const {
  std::vector<std::int64_t> flat;
  flat.reserve(prompts.size() * static_cast<std::size_t>(config_.max_len));
  for (const auto& p : prompts) {
    const auto ids = token_ids(p);
    flat.insert(flat.end(), ids.begin(), ids.end());
  }
  const auto b = static_cast<std::int64_t>(prompts.size());
  auto ids = torch::tensor(flat, torch::kLong);
  torch::Tensor rows = token_embedding;
  if (!placeholders_.empty()) {
    std::vector<torch::Tensor> parts{token_embedding};
    for (const auto& [token, row] : placeholders_) parts.push_back(row.unsqueeze(0));
    rows = torch::cat(parts, 0);
  }
  auto h = rows.index_select(0, ids).reshape({b, config_.max_len, config_.dim}) + position_embedding;
  h = h + attn.ptr()->forward(ln_attn.ptr()->forward(h), torch::Tensor(), lora);
  h = h + mlp_out.ptr()->forward(torch::gelu(mlp_in.ptr()->forward(ln_mlp.ptr()->forward(h))));
  return ln_out.ptr()->forward(h);
}

torch::Tensor ConditioningEncoderImpl::register_placeholder(const std::string& token,
                                                           const std::string& init_word) {
  if (vocab_.id(token) || has_placeholder(token)) {
    throw ValidationError("placeholder token '" + token + "' is already registered");
  }
  if (tokenize(token) != std::vector<std::string>{token}) {
    throw ValidationError("placeholder token '" + token + "' must be a single <...> token");
  }
  const auto init = vocab_.id(init_word);
  if (!init) throw ValidationError("init word '" + init_word + "' is not in the vocabulary");
  auto row = token_embedding.detach()[*init].clone();
  placeholders_.emplace_back(token, row);
  return row;
}

bool ConditioningEncoderImpl::has_placeholder(std::string_view token) const {
  return std::any_of(placeholders_.begin(), placeholders_.end(),
                     [&](const auto& p) { return p.first == token; });
}

torch::Tensor ConditioningEncoderImpl::placeholder(std::string_view token) const {
  for (const auto& [name, row] : placeholders_) {
    if (name == token) return row;
  }
  throw ValidationError("placeholder '" + std::string(token) + "' is not registered");
}

std::vector<std::string> ConditioningEncoderImpl::placeholder_tokens() const {
  std::vector<std::string> out;
  for (const auto& p : placeholders_) out.push_back(p.first);
  return out;
}

void ConditioningEncoderImpl::clear_placeholders() { placeholders_.clear(); }

}  // namespace dermaug
