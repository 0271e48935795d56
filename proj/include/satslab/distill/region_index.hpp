#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "satslab/error.hpp"

namespace satslab::distill {

inline constexpr std::uint8_t kIgnoreLabel = 255;

enum class LabelDownsample { nearest, majority };

/// Per block, the token rows of each foreground class. Rows are in
/// row-major (u·grid_side + v) order, ascending.
struct ClassRegionIndex {
  struct Block {
    std::size_t grid_side = 0;
    std::map<std::uint8_t, std::vector<std::size_t>> regions;  // only nonempty, never class 0
  };
  std::vector<Block> blocks;

  /// Classes with a nonempty region in at least one of `blocks_used`
  /// (all blocks when empty).
  std::vector<std::uint8_t> present_classes(const std::vector<std::size_t>& blocks_used = {}) const {
    std::vector<std::uint8_t> out;
    auto add = [&](const Block& b) {
      for (const auto& [c, rows] : b.regions) out.push_back(c);
    };
    if (blocks_used.empty()) {
      for (const auto& b : blocks) add(b);
    } else {
      for (auto j : blocks_used) add(blocks.at(j));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool empty() const { return present_classes().empty(); }
};

/// Downsamples a square label map to each grid side in `grid_sides`.
///
/// nearest: cell (u,v) takes the label of pixel (u·s + s/2, v·s + s/2) with
/// s = image_size / grid_side. majority: the most frequent non-ignored label in
/// the s×s cell, ties to the lower id. Cells resolving to background or to the
/// ignore label join no region.
inline ClassRegionIndex build_region_index(std::span<const std::uint8_t> labels, std::size_t image_size,
                                           const std::vector<std::size_t>& grid_sides, std::size_t class_count,
                                           LabelDownsample mode = LabelDownsample::nearest) {
  if (labels.size() != image_size * image_size) {
    throw ConfigError("build_region_index: label map has " + std::to_string(labels.size()) + " entries, expected " +
                      std::to_string(image_size * image_size));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kIgnoreLabel && labels[i] >= class_count) {
      throw DataError("build_region_index: label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                      " is outside the " + std::to_string(class_count) + " current classes");
    }
  }
  ClassRegionIndex index;
  for (auto g : grid_sides) {
    if (g == 0 || image_size % g) {
      throw ConfigError("build_region_index: grid side " + std::to_string(g) + " does not divide image size " +
                        std::to_string(image_size));
    }
    const std::size_t s = image_size / g;
    ClassRegionIndex::Block block{g, {}};
    std::vector<std::size_t> votes(class_count);
    for (std::size_t u = 0; u < g; ++u)
      for (std::size_t v = 0; v < g; ++v) {
        std::uint8_t label;
        if (mode == LabelDownsample::nearest) {
          label = labels[(u * s + s / 2) * image_size + (v * s + s / 2)];
        } else {
          std::fill(votes.begin(), votes.end(), 0);
          std::size_t counted = 0;
          for (std::size_t dy = 0; dy < s; ++dy)
            for (std::size_t dx = 0; dx < s; ++dx) {
              const auto l = labels[(u * s + dy) * image_size + (v * s + dx)];
              if (l == kIgnoreLabel) continue;
              ++votes[l];
              ++counted;
            }
          label = counted ? static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin())
                          : kIgnoreLabel;
        }
        if (label == 0 || label == kIgnoreLabel) continue;
        block.regions[label].push_back(u * g + v);
      }
    index.blocks.push_back(std::move(block));
  }
  return index;
}

}  // namespace satslab::distill
