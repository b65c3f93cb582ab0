#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "dermaug/hashing.hpp"

namespace dermaug {

/// Self-describing tensor container shared by every checkpoint type.
///
/// Layout: 8-byte magic "DERMAUG1", little-endian u64 header length, a UTF-8
/// JSON header, then the raw tensor payloads in header order. The header holds
/// `kind`, `format_version`, free-form `meta`, and one entry per tensor
/// (name, dtype, shape, offset, nbytes). Only float32/float64/int64 tensors are stored.
struct TensorArchive {
  std::string kind;
  int format_version = 0;
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;

  /// Throws ValidationError when the name is absent.
  const torch::Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);

/// Rejects files with a different kind or a format version newer/older than
/// `supported_version`.
TensorArchive read_archive(const std::filesystem::path& path, std::string_view expected_kind,
                           int supported_version);

}  // namespace dermaug
