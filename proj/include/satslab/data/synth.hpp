#pragma once

// Deterministic synthetic segmentation scenes.
//
// Every foreground class has a signature (shape family, texture). Textures
// are period-2 binary patterns over two fixed palette colours, so a single
// pixel carries no class identity; only the 2×2 arrangement does. Background
// pixels pick one of the same two colours independently, so a background
// patch is a random 4-bit tile and only its neighbourhood tells it apart from
// a textured shape.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "satslab/error.hpp"
#include "satslab/io/json.hpp"

namespace satslab::data {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kMaxClasses = 16;

enum class ShapeFamily : std::uint8_t { rectangle, circle, triangle, ring };

inline const char* shape_name(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::rectangle: return "rectangle";
    case ShapeFamily::circle: return "circle";
    case ShapeFamily::triangle: return "triangle";
    case ShapeFamily::ring: return "ring";
  }
  return "?";
}

/// One cell of a 2×2 texture tile: bit (y%2)*2 + (x%2) selects colour B.
struct ClassSignature {
  ShapeFamily shape;
  std::uint8_t texture;  // 4-bit pattern
  bool operator==(const ClassSignature&) const = default;
};

struct SceneSpec {
  std::size_t image_size = 32;
  std::size_t class_count = 6;  // foreground classes; ids 1..class_count
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 4;
  std::size_t min_extent = 12;
  std::size_t max_extent = 16;
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::size_t train_size = 200;
  std::size_t eval_size = 50;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("scene spec: " + m); };
    if (class_count < 2) fail("class_count must be at least 2");
    if (class_count > kMaxClasses) fail("class_count must be at most " + std::to_string(kMaxClasses));
    if (image_size < 8 || image_size % 2) fail("image_size must be an even number >= 8");
    if (min_shapes < 1 || max_shapes < min_shapes) fail("need 1 <= min_shapes <= max_shapes");
    if (min_extent < 3 || max_extent < min_extent || max_extent > image_size) {
      fail("need 3 <= min_extent <= max_extent <= image_size");
    }
    if (!(noise >= 0.0)) fail("noise must be nonnegative");
    if (train_size < 1 || eval_size < 1) fail("split sizes must be at least 1");
  }
};

/// Textures ordered so that the first few classes get the most distinct
/// patterns (flat, stripes, checkers) before the single-dot variants.
inline constexpr std::array<std::uint8_t, 16> kTextureOrder = {0b0011, 0b0101, 0b0110, 0b0000, 0b1100, 0b1010,
                                                              0b1001, 0b1111, 0b0001, 0b0010, 0b0100, 0b1000,
                                                              0b1110, 0b1101, 0b1011, 0b0111};

inline ClassSignature signature_of(std::size_t class_id) {
  if (class_id < 1 || class_id > kMaxClasses) throw UsageError("signature_of: class id out of range");
  return {static_cast<ShapeFamily>((class_id - 1) % 4), kTextureOrder[class_id - 1]};
}

inline constexpr std::array<float, 3> kColorA{0.64f, 0.38f, 0.60f};
inline constexpr std::array<float, 3> kColorB{0.36f, 0.62f, 0.40f};

struct Sample {
  std::uint32_t id = 0;
  std::size_t image_size = 0;
  std::vector<float> image;           // (image_size, image_size, 3) row-major, values in [0,1]
  std::vector<std::uint8_t> labels;   // (image_size, image_size), 0 = background
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  SceneSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> eval;
  /// Shapes dropped because placement failed after bounded retries.
  std::size_t dropped_shapes = 0;
};

namespace detail {

inline bool inside(ShapeFamily s, double px, double py, double x0, double y0, double w, double h) {
  const double cx = x0 + w / 2, cy = y0 + h / 2;
  switch (s) {
    case ShapeFamily::rectangle:
      return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
    case ShapeFamily::circle: {
      const double r = std::min(w, h) / 2;
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeFamily::triangle: {
      if (py < y0 || py >= y0 + h) return false;
      const double half = (py - y0) / h * (w / 2);
      return std::abs(px - cx) <= half;
    }
    case ShapeFamily::ring: {
      const double r = std::min(w, h) / 2;
      const double d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
  }
  return false;
}

}  // namespace detail

/// Renders one scene. Public so that tests can exercise the rasterizer.
inline Sample render_scene(const SceneSpec& spec, std::uint32_t id, std::mt19937_64& rng, std::size_t& dropped) {
  const std::size_t n = spec.image_size;
  Sample s;
  s.id = id;
  s.image_size = n;
  s.image.assign(n * n * kChannels, 0.0f);
  s.labels.assign(n * n, 0);
  std::vector<std::uint8_t> blocked(n * n, 0);

  std::uniform_int_distribution<std::size_t> count_dist(spec.min_shapes, spec.max_shapes);
  std::uniform_int_distribution<std::size_t> extent_dist(spec.min_extent, spec.max_extent);
  std::vector<std::size_t> classes(spec.class_count);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c + 1;
  std::shuffle(classes.begin(), classes.end(), rng);
  const std::size_t shapes = std::min(count_dist(rng), classes.size());

  // Shapes go into distinct cells of a c×c layout (c = ceil(sqrt(max_shapes)))
  // at a random offset; shapes larger than a cell fall back to placement
  // anywhere. Either way a candidate touching an earlier shape is retried.
  std::size_t cells = 1;
  while (cells * cells < spec.max_shapes) ++cells;
  const std::size_t cell = n / cells;
  std::vector<std::size_t> cell_order(cells * cells);
  for (std::size_t i = 0; i < cell_order.size(); ++i) cell_order[i] = i;
  std::shuffle(cell_order.begin(), cell_order.end(), rng);

  constexpr int kRetries = 64;
  for (std::size_t k = 0; k < shapes; ++k) {
    const std::size_t cls = classes[k];
    const auto sig = signature_of(cls);
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      const std::size_t w = extent_dist(rng), h = extent_dist(rng);
      std::size_t lo_x = 0, lo_y = 0, span_x = n, span_y = n;
      if (w <= cell && h <= cell && attempt < kRetries / 2) {
        lo_x = (cell_order[k] % cells) * cell;
        lo_y = (cell_order[k] / cells) * cell;
        span_x = span_y = cell;
      }
      std::uniform_int_distribution<std::size_t> xd(lo_x, lo_x + span_x - w), yd(lo_y, lo_y + span_y - h);
      const double x0 = double(xd(rng)), y0 = double(yd(rng));
      std::vector<std::size_t> mask;
      bool clash = false;
      for (std::size_t y = 0; y < n && !clash; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          if (!detail::inside(sig.shape, x + 0.5, y + 0.5, x0, y0, double(w), double(h))) continue;
          if (blocked[y * n + x]) {
            clash = true;
            break;
          }
          mask.push_back(y * n + x);
        }
      if (clash || mask.empty()) continue;
      for (auto p : mask) {
        s.labels[p] = static_cast<std::uint8_t>(cls);
        blocked[p] = 1;
      }
      placed = true;
    }
    if (!placed) ++dropped;
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t p = y * n + x;
      std::array<double, 3> rgb;
      if (s.labels[p] == 0) {
        const auto& col = coin(rng) ? kColorB : kColorA;
        for (int c = 0; c < 3; ++c) rgb[c] = col[c];
      } else {
        const auto sig = signature_of(s.labels[p]);
        const bool use_b = (sig.texture >> ((y % 2) * 2 + (x % 2))) & 1;
        const auto& col = use_b ? kColorB : kColorA;
        for (int c = 0; c < 3; ++c) rgb[c] = col[c];
      }
      for (int c = 0; c < 3; ++c) {
        double v = rgb[c];
        if (spec.noise > 0) v += spec.noise * normal(rng);
        s.image[p * kChannels + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

/// Generates train and eval splits. Sample ids are 0..train_size-1 for train
/// and continue for eval. Identical specs give bit-identical datasets.
inline Dataset generate(const SceneSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  std::mt19937_64 rng(spec.seed);
  std::uint32_t id = 0;
  for (std::size_t i = 0; i < spec.train_size; ++i) ds.train.push_back(render_scene(spec, id++, rng, ds.dropped_shapes));
  for (std::size_t i = 0; i < spec.eval_size; ++i) ds.eval.push_back(render_scene(spec, id++, rng, ds.dropped_shapes));
  return ds;
}

/// Number of images in `samples` that contain each class (index = class id).
inline std::vector<std::size_t> class_image_counts(const std::vector<Sample>& samples, std::size_t class_count) {
  std::vector<std::size_t> counts(class_count + 1, 0);
  for (const auto& s : samples) {
    std::vector<bool> seen(class_count + 1, false);
    for (auto l : s.labels)
      if (l <= class_count) seen[l] = true;
    for (std::size_t c = 0; c <= class_count; ++c) counts[c] += seen[c];
  }
  return counts;
}

inline io::json to_json(const SceneSpec& s) {
  return io::json{{"image_size", s.image_size}, {"class_count", s.class_count}, {"min_shapes", s.min_shapes},
                  {"max_shapes", s.max_shapes}, {"min_extent", s.min_extent},   {"max_extent", s.max_extent},
                  {"noise", s.noise},           {"seed", s.seed},               {"train_size", s.train_size},
                  {"eval_size", s.eval_size}};
}

inline SceneSpec scene_spec_from_json(const io::json& j, const std::string& path = "") {
  io::ObjectReader r(j, path);
  SceneSpec s;
  s.image_size = r.get_or("image_size", s.image_size);
  s.class_count = r.get_or("class_count", s.class_count);
  s.min_shapes = r.get_or("min_shapes", s.min_shapes);
  s.max_shapes = r.get_or("max_shapes", s.max_shapes);
  s.min_extent = r.get_or("min_extent", s.min_extent);
  s.max_extent = r.get_or("max_extent", s.max_extent);
  s.noise = r.get_or("noise", s.noise);
  s.seed = r.get_or("seed", s.seed);
  s.train_size = r.get_or("train_size", s.train_size);
  s.eval_size = r.get_or("eval_size", s.eval_size);
  r.finish();
  s.validate();
  return s;
}

}  // namespace satslab::data
