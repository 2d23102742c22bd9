#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dreg {

// Flat float32 tensor as stored on disk.
struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const;
  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

// `.tns`: magic "TNS1", u32 rank, u32 dims[rank], float32 little-endian row-major payload.
void write_tns(std::ostream& out, const StoredTensor& tensor);
StoredTensor read_tns(std::istream& in);
void save_tns(const StoredTensor& tensor, const std::filesystem::path& path);
StoredTensor load_tns(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  StoredTensor tensor;
};

// Bundle: magic "TNSB", u32 header length, UTF-8 JSON header, u32 tensor count,
// then per tensor u32 name length, name bytes, and one embedded TNS1 record.
struct TensorBundle {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const StoredTensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_bundle(const TensorBundle& bundle, const std::filesystem::path& path);
TensorBundle load_bundle(const std::filesystem::path& path);

// 64-bit FNV-1a over a file's bytes; used for determinism checks.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace dreg
