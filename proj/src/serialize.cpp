#include "mobe/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mobe {
namespace {

static_assert(std::endian::native == std::endian::little,
              "MBT1 I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("MBT1: truncated stream");
  }
  return v;
}

std::uint64_t fnv_bytes(const void* p, std::size_t n, std::uint64_t h) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("MBT1", 4);
  put<std::uint32_t>(os, kMbtDtypeF64);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MBT1", 4) != 0) {
    throw std::runtime_error("MBT1: bad magic");
  }
  const auto dtype = get<std::uint32_t>(is);
  if (dtype != kMbtDtypeF64) {
    throw std::runtime_error("MBT1: unsupported dtype code " + std::to_string(dtype));
  }
  const auto ndim = get<std::uint32_t>(is);
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  std::vector<double> data(shape_size(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    throw std::runtime_error("MBT1: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_tensor(is);
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

Tensor decode_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto d : t.shape()) {
    const std::uint64_t d64 = d;
    h = fnv_bytes(&d64, sizeof d64, h);
  }
  return fnv_bytes(t.data().data(), t.size() * sizeof(double), h);
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace mobe
