#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "mobe/tensor.hpp"

namespace mobe {

// MBT1 layout: "MBT1", u32 dtype (2 = f64), u32 ndim, ndim x u64 dims,
// row-major payload. All integers and values little-endian.
inline constexpr std::uint32_t kMbtDtypeF64 = 2;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes);

/// FNV-1a over shape and raw value bytes.
std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace mobe
