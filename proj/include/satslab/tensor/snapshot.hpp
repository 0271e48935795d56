#pragma once

// Parameter snapshot file:
//
//   magic   4 bytes  "SATP"
//   version u32      1
//   count   u32      number of tensor records
//   record  × count:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u32 × rank
//     values   float32 × prod(dims)
//
// All integers and floats are little-endian. Values are stored at 32-bit
// precision regardless of the in-memory scalar type.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "satslab/io/binary.hpp"
#include "satslab/io/files.hpp"
#include "satslab/tensor/tensor.hpp"

namespace satslab {

inline constexpr char kSnapshotMagic[4] = {'S', 'A', 'T', 'P'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
std::vector<std::uint8_t> encode_snapshot(const NamedTensors<T>& tensors) {
  io::ByteWriter w;
  w.raw(std::string_view(kSnapshotMagic, 4));
  w.u32(kSnapshotVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : t.data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

template <class T>
NamedTensors<T> decode_snapshot(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  if (r.raw(4) != std::string_view(kSnapshotMagic, 4)) throw DataError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kSnapshotVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.u32();
  NamedTensors<T> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32());
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw DataError(what + ": zero dimension in tensor '" + name + "'");
    }
    const auto n = numel_of(shape);
    if (r.remaining() / 4 < n) throw DataError(what + ": truncated values for tensor '" + name + "'");
    std::vector<T> values(n);
    for (auto& v : values) v = static_cast<T>(r.f32());
    out.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw DataError(what + ": trailing bytes after last record");
  return out;
}

template <class T>
void save_snapshot(const std::filesystem::path& path, const NamedTensors<T>& tensors) {
  io::write_bytes(path, encode_snapshot(tensors));
}

template <class T>
NamedTensors<T> load_snapshot(const std::filesystem::path& path) {
  return decode_snapshot<T>(io::read_bytes(path), path.string());
}

}  // namespace satslab
