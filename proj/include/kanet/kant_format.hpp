#pragma once

// Binary tensor records ("KANT"):
//
//   offset  size   field
//   0       4      magic "KANT"
//   4       1      version (1)
//   5       1      dtype (0 = f32, 1 = f64)
//   6       1      ndim
//   7       1      reserved (0)
//   8       8*nd   dims, u64 little-endian
//   ...     ...    payload, row-major, IEEE-754 little-endian
//
// A file may hold several records back to back; checkpoints use that to store
// a fixed sequence of parameter tensors.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "kanet/tensor.hpp"

namespace kanet {

inline constexpr std::array<char, 4> kKantMagic{'K', 'A', 'N', 'T'};
inline constexpr std::uint8_t kKantVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <std::floating_point T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "KANT stores f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <class U>
void put_le(std::ostream& os, U bits) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw FormatError("KANT: truncated record");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <std::floating_point T>
using bits_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

struct KantHeader {
  DType dtype;
  Shape shape;
};

inline KantHeader read_header(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kKantMagic) throw FormatError("KANT: bad magic");
  const auto version = get_le<std::uint8_t>(is);
  if (version != kKantVersion) throw FormatError("KANT: unsupported version " + std::to_string(version));
  const auto dtype = get_le<std::uint8_t>(is);
  if (dtype > 1) throw FormatError("KANT: unknown dtype " + std::to_string(dtype));
  const auto ndim = get_le<std::uint8_t>(is);
  (void)get_le<std::uint8_t>(is);
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
  return {static_cast<DType>(dtype), std::move(shape)};
}

template <std::floating_point Stored, std::floating_point T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / sizeof(Stored) / d)
      throw FormatError("KANT: shape " + shape_string(shape) + " too large");
    n *= d;
  }
  if (const auto here = is.tellg(); here != std::streampos(-1)) {
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(here);
    if (static_cast<std::size_t>(end - here) < n * sizeof(Stored)) throw FormatError("KANT: truncated payload");
  }
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(std::bit_cast<Stored>(get_le<bits_of<Stored>>(is)));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace detail

template <std::floating_point T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.ndim() > 255) throw ArgumentError("KANT: too many dimensions");
  os.write(kKantMagic.data(), 4);
  detail::put_le<std::uint8_t>(os, kKantVersion);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  detail::put_le<std::uint8_t>(os, 0);
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(os, d);
  for (T v : t.data()) detail::put_le(os, std::bit_cast<detail::bits_of<T>>(v));
}

/// Read one record whose dtype must be T.
template <std::floating_point T>
Tensor<T> read_tensor(std::istream& is) {
  auto header = detail::read_header(is);
  if (header.dtype != dtype_of<T>()) throw FormatError("KANT: dtype mismatch");
  return detail::read_payload<T, T>(is, std::move(header.shape));
}

/// Read one record of either dtype, converting to T.
template <std::floating_point T>
Tensor<T> read_tensor_as(std::istream& is) {
  auto header = detail::read_header(is);
  if (header.dtype == DType::f32) return detail::read_payload<float, T>(is, std::move(header.shape));
  return detail::read_payload<double, T>(is, std::move(header.shape));
}

template <std::floating_point T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IngestionError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IngestionError("write failed: " + path.string());
}

template <std::floating_point T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path.string());
  return read_tensor<T>(is);
}

template <std::floating_point T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path.string());
  return read_tensor_as<T>(is);
}

template <std::floating_point T>
void save_tensors(const std::filesystem::path& path, std::span<const Tensor<T>* const> tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IngestionError("cannot open " + path.string() + " for writing");
  for (const auto* t : tensors) write_tensor(os, *t);
  if (!os) throw IngestionError("write failed: " + path.string());
}

template <std::floating_point T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path.string());
  std::vector<Tensor<T>> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor<T>(is));
  return out;
}

/// Overwrite `targets` in order from a multi-record file; shapes must match.
template <std::floating_point T>
void load_tensors_into(const std::filesystem::path& path, std::span<Tensor<T>* const> targets) {
  auto loaded = load_tensors<T>(path);
  if (loaded.size() != targets.size()) {
    throw FormatError("KANT: expected " + std::to_string(targets.size()) + " records in " + path.string() + ", found " +
                      std::to_string(loaded.size()));
  }
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    if (loaded[i].shape() != targets[i]->shape()) {
      throw FormatError("KANT: record " + std::to_string(i) + " has shape " + shape_string(loaded[i].shape()) +
                        ", expected " + shape_string(targets[i]->shape()));
    }
    *targets[i] = std::move(loaded[i]);
  }
}

}  // namespace kanet
