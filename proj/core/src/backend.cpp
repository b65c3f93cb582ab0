#include "dermaug/backend.hpp"

#include <nlohmann/json.hpp>

namespace dermaug {

std::string DiffusionBackend::fingerprint() const {
  const auto& g = geometry();
  const auto& s = schedule();
  nlohmann::json j = {{"image", {g.image_channels, g.image_size}},
                      {"latent", {g.latent_channels, g.latent_size}},
                      {"context", {g.context_len, g.context_dim}},
                      {"steps", s.steps},
                      {"beta_first", s.betas.empty() ? 0.0 : s.betas.front()},
                      {"beta_last", s.betas.empty() ? 0.0 : s.betas.back()},
                      {"parameters", base_parameter_digest(*this)}};
  return sha256_hex(j.dump());
}

std::string base_parameter_digest(const DiffusionBackend& backend) {
  Sha256 h;
  for (const auto& group : backend.parameter_groups()) {
    if (group.name == "placeholders") continue;
    h.update(group.name).update("\n").update(tensor_digest(group.tensors)).update("\n");
  }
  return h.hex_digest();
}

std::string group_digest(const DiffusionBackend& backend, const std::string& group) {
  for (const auto& g : backend.parameter_groups()) {
    if (g.name == group) return tensor_digest(g.tensors);
  }
  return tensor_digest({});
}

}  // namespace dermaug
