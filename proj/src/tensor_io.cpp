#include "dreg/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>

#include "dreg/error.hpp"

namespace dreg {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  char b[4];
  if (!in.read(b, 4)) throw IoError("truncated tensor stream");
  std::uint32_t v = 0;
  std::memcpy(&v, b, 4);
  return v;
}

void expect_magic(std::istream& in, const char* magic) {
  char m[4];
  if (!in.read(m, 4) || std::memcmp(m, magic, 4) != 0) {
    throw IoError(std::string("bad magic, expected ") + std::string(magic, 4));
  }
}

}  // namespace

std::size_t StoredTensor::element_count() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void write_tns(std::ostream& out, const StoredTensor& tensor) {
  if (tensor.element_count() != tensor.data.size()) throw ValidationError("tensor dims do not match payload");
  out.write("TNS1", 4);
  put_u32(out, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_u32(out, d);
  out.write(reinterpret_cast<const char*>(tensor.data.data()),
            static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
}

StoredTensor read_tns(std::istream& in) {
  expect_magic(in, "TNS1");
  StoredTensor t;
  const auto rank = get_u32(in);
  if (rank > 16) throw IoError("implausible tensor rank");
  for (std::uint32_t r = 0; r < rank; ++r) t.dims.push_back(get_u32(in));
  t.data.resize(t.element_count());
  if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)))) {
    throw IoError("truncated tensor payload");
  }
  return t;
}

void save_tns(const StoredTensor& tensor, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_tns(out, tensor);
}

StoredTensor load_tns(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tns(in);
}

const StoredTensor& TensorBundle::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw ValidationError("bundle has no tensor named '" + name + "'");
}

bool TensorBundle::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void save_bundle(const TensorBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string header = bundle.header.dump();
  out.write("TNSB", 4);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put_u32(out, static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& t : bundle.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_tns(out, t.tensor);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TensorBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  expect_magic(in, "TNSB");
  TensorBundle bundle;
  std::string header(get_u32(in), '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header.size()))) throw IoError("truncated bundle header");
  bundle.header = nlohmann::json::parse(header);
  const auto count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get_u32(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw IoError("truncated tensor name");
    t.tensor = read_tns(in);
    bundle.tensors.push_back(std::move(t));
  }
  return bundle;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace dreg
