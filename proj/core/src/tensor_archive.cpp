#include "dermaug/tensor_archive.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "dermaug/error.hpp"

namespace dermaug {
namespace {

constexpr std::array<char, 8> kMagic{'D', 'E', 'R', 'M', 'A', 'U', 'G', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "f32";
    case torch::kFloat64:
      return "f64";
    case torch::kInt64:
      return "i64";
    default:
      throw ValidationError("tensor archive: unsupported dtype " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  throw ValidationError("tensor archive: unknown dtype '" + name + "'");
}

}  // namespace

const torch::Tensor& TensorArchive::at(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ValidationError("tensor archive (" + kind + "): missing tensor '" + std::string(name) + "'");
}

bool TensorArchive::contains(std::string_view name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["kind"] = archive.kind;
  header["format_version"] = archive.format_version;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();

  std::vector<torch::Tensor> payloads;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().cpu().contiguous();
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    payloads.push_back(std::move(t));
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : payloads) {
    out.write(static_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw StageError("short write to " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path, std::string_view expected_kind,
                           int supported_version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ValidationError(path.string() + ": not a dermaug archive");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 31)) throw ValidationError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError(path.string() + ": truncated header");

  const auto header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded()) throw ValidationError(path.string() + ": header is not JSON");

  TensorArchive archive;
  archive.kind = header.value("kind", "");
  archive.format_version = header.value("format_version", -1);
  if (archive.kind != expected_kind) {
    throw ValidationError(path.string() + ": expected a '" + std::string(expected_kind) +
                          "' archive, found '" + archive.kind + "'");
  }
  if (archive.format_version != supported_version) {
    throw ValidationError(path.string() + ": unsupported format version " +
                          std::to_string(archive.format_version) + " (supported: " +
                          std::to_string(supported_version) + ")");
  }
  archive.meta = header.value("meta", nlohmann::json::object());

  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<std::uint64_t>(t.numel()) * t.element_size() != nbytes) {
      throw ValidationError(path.string() + ": size mismatch for tensor " +
                            entry.at("name").get<std::string>());
    }
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw ValidationError(path.string() + ": truncated payload");
    archive.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return archive;
}

}  // namespace dermaug
