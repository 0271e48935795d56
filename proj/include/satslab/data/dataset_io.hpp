#pragma once

// Dataset directory layout:
//   manifest.json            spec, class count, per-split sample ids, blob names, sha256 checksums
//   train/<id>.bin, eval/<id>.bin
// Blob: "SATD", u32 version, u32 sample id, u32 height, u32 width, u32 channels,
// then height*width*channels f32 LE pixel values, then height*width u8 labels.
// docs/formats.md has the byte-level description.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "satslab/data/synth.hpp"
#include "satslab/error.hpp"
#include "satslab/io/binary.hpp"
#include "satslab/io/files.hpp"
#include "satslab/io/json.hpp"

namespace satslab::data {

namespace fs = std::filesystem;

inline constexpr char kBlobMagic[4] = {'S', 'A', 'T', 'D'};
inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr const char* kManifestFormat = "satslab-dataset";

inline std::vector<std::uint8_t> encode_sample(const Sample& s) {
  io::ByteWriter w;
  w.raw(std::string_view(kBlobMagic, 4));
  w.u32(kBlobVersion);
  w.u32(s.id);
  w.u32(static_cast<std::uint32_t>(s.image_size));
  w.u32(static_cast<std::uint32_t>(s.image_size));
  w.u32(static_cast<std::uint32_t>(kChannels));
  for (float v : s.image) w.f32(v);
  for (auto l : s.labels) w.u8(l);
  return w.bytes();
}

/// `what` names the sample in error messages.
inline Sample decode_sample(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  if (r.raw(4) != std::string(kBlobMagic, 4)) throw DataError(what + ": bad blob magic");
  if (const auto v = r.u32(); v != kBlobVersion) throw DataError(what + ": unsupported blob version " + std::to_string(v));
  Sample s;
  s.id = r.u32();
  const std::uint32_t h = r.u32(), w = r.u32(), c = r.u32();
  if (h != w || h == 0) throw DataError(what + ": expected a square image, got " + std::to_string(h) + "x" + std::to_string(w));
  if (c != kChannels) throw DataError(what + ": expected 3 channels, got " + std::to_string(c));
  s.image_size = h;
  const std::size_t px = std::size_t(h) * w;
  if (r.remaining() != px * c * 4 + px) {
    throw DataError(what + ": truncated or oversized blob (" + std::to_string(r.remaining()) + " payload bytes, expected " +
                    std::to_string(px * c * 4 + px) + ")");
  }
  s.image.resize(px * c);
  for (auto& v : s.image) v = r.f32();
  s.labels.resize(px);
  for (auto& l : s.labels) l = r.u8();
  return s;
}

namespace detail {

inline std::string blob_name(const std::string& split, std::uint32_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06u.bin", id);
  return split + "/" + buf;
}

}  // namespace detail

/// Writes `ds` under `dir` (created if needed). Existing files are overwritten.
inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "train", ec);
  fs::create_directories(dir / "eval", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::json manifest{{"format", kManifestFormat},
                    {"version", kBlobVersion},
                    {"spec", to_json(ds.spec)},
                    {"class_count", ds.spec.class_count},
                    {"dropped_shapes", ds.dropped_shapes}};
  for (const auto* split : {"train", "eval"}) {
    const auto& samples = std::string(split) == "train" ? ds.train : ds.eval;
    io::json entries = io::json::array();
    for (const auto& s : samples) {
      const auto bytes = encode_sample(s);
      const auto name = detail::blob_name(split, s.id);
      io::write_bytes(dir / name, bytes);
      entries.push_back({{"id", s.id}, {"file", name}, {"sha256", io::sha256_hex(bytes)}});
    }
    manifest["splits"][split] = entries;
  }
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads the dataset at `dir`, verifying checksums, dimensions and label range.
inline Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  const auto manifest = io::parse_json(io::read_text(dir / "manifest.json"), (dir / "manifest.json").string());
  Dataset ds;
  std::size_t class_count = 0;
  std::vector<std::pair<std::string, io::json>> splits;
  try {
    io::ObjectReader r(manifest, "");
    if (r.get<std::string>("format") != kManifestFormat) throw DataError("manifest: not a satslab dataset");
    if (r.get<std::uint32_t>("version") != kBlobVersion) throw DataError("manifest: unsupported version");
    ds.spec = scene_spec_from_json(*r.raw("spec"), "/spec");
    class_count = r.get<std::size_t>("class_count");
    ds.dropped_shapes = r.get_or<std::size_t>("dropped_shapes", 0);
    auto sr = r.child("splits");
    for (const auto* split : {"train", "eval"}) {
      const io::json* arr = sr.raw(split);
      if (!arr || !arr->is_array()) throw DataError("manifest: /splits/" + std::string(split) + " must be an array");
      splits.emplace_back(split, *arr);
    }
    sr.finish();
    r.finish();
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (class_count != ds.spec.class_count) {
    throw DataError("manifest: class_count " + std::to_string(class_count) + " disagrees with spec class_count " +
                    std::to_string(ds.spec.class_count));
  }
  for (const auto& [split, arr] : splits) {
    auto& out = split == "train" ? ds.train : ds.eval;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& e = arr[i];
      if (!e.is_object() || !e.contains("id") || !e.contains("file") || !e.contains("sha256")) {
        throw DataError("manifest: /splits/" + split + "/" + std::to_string(i) + " needs id, file and sha256");
      }
      const auto id = e["id"].get<std::uint32_t>();
      const auto file = e["file"].get<std::string>();
      const std::string what = "sample " + std::to_string(id) + " (" + file + ")";
      const auto bytes = io::read_bytes(dir / file);
      if (io::sha256_hex(bytes) != e["sha256"].get<std::string>()) throw DataError(what + ": checksum mismatch");
      Sample s = decode_sample(bytes, what);
      if (s.id != id) throw DataError(what + ": blob holds sample id " + std::to_string(s.id));
      if (s.image_size != ds.spec.image_size) throw DataError(what + ": image size disagrees with the manifest spec");
      for (auto l : s.labels) {
        if (l > class_count) {
          throw DataError(what + ": label " + std::to_string(l) + " exceeds manifest class_count " +
                          std::to_string(class_count));
        }
      }
      out.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace satslab::data
