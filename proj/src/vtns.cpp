#include "ditflow/vtns.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ditflow::vtns {
namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::string& out, U v) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  out.append(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("VTNS: truncated data");
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, in.data() + pos, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  pos += sizeof(U);
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
Tensor<T> decode_payload(const std::string& bytes, std::size_t pos, Shape dims) {
  const std::size_t n = numel(dims);
  if (bytes.size() - pos != n * sizeof(T))
    throw FormatError("VTNS: payload size " + std::to_string(bytes.size() - pos) + " does not match dims " +
                      to_string(dims));
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = get_le<T>(bytes, pos);
  return Tensor<T>(std::move(dims), std::move(values));
}

}  // namespace

template <typename T>
std::string encode(const Tensor<T>& t) {
  std::string out = "VTNS";
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(dtype_of<T>()));
  if (t.rank() > 255) throw FormatError("VTNS: rank above 255");
  out.push_back(static_cast<char>(t.rank()));
  out.append(5, '\0');
  for (std::size_t d : t.dims()) put_le<std::uint64_t>(out, d);
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values()) put_le<T>(out, v);
  return out;
}

AnyTensor decode(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "VTNS") != 0) throw FormatError("VTNS: bad magic");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kVersion) throw FormatError("VTNS: unsupported version " + std::to_string(version));
  const auto dtype = static_cast<std::uint8_t>(bytes[5]);
  const auto ndim = static_cast<std::uint8_t>(bytes[6]);
  std::size_t pos = 12;
  Shape dims(ndim);
  for (auto& d : dims) d = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, pos));
  if (dtype == static_cast<std::uint8_t>(DType::f32)) return decode_payload<float>(bytes, pos, std::move(dims));
  if (dtype == static_cast<std::uint8_t>(DType::f64)) return decode_payload<double>(bytes, pos, std::move(dims));
  throw FormatError("VTNS: unknown dtype " + std::to_string(dtype));
}

template <typename T>
Tensor<T> decode_as(const std::string& bytes) {
  AnyTensor any = decode(bytes);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(std::string("VTNS: expected dtype ") + (std::is_same_v<T, float> ? "f32" : "f64"));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode(t));
}

template <typename T>
Tensor<T> load(const std::filesystem::path& path) {
  return decode_as<T>(read_file(path));
}

template std::string encode(const Tensor<float>&);
template std::string encode(const Tensor<double>&);
template Tensor<float> decode_as(const std::string&);
template Tensor<double> decode_as(const std::string&);
template void save(const std::filesystem::path&, const Tensor<float>&);
template void save(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load(const std::filesystem::path&);
template Tensor<double> load(const std::filesystem::path&);

}  // namespace ditflow::vtns
