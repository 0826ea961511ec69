#pragma once

// VTNS binary tensor format:
//   "VTNS" | u8 version (1) | u8 dtype (0 = f32, 1 = f64) | u8 ndim |
//   5 reserved zero bytes | ndim x u64 LE extents | LE row-major payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>

#include "ditflow/tensor.hpp"

namespace ditflow::vtns {

inline constexpr std::uint8_t kVersion = 1;
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
std::string encode(const Tensor<T>& t);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor decode(const std::string& bytes);

/// Decode and require the stored dtype to be T.
template <typename T>
Tensor<T> decode_as(const std::string& bytes);

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace ditflow::vtns
