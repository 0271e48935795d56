#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "satslab/error.hpp"
#include "satslab/io/json.hpp"

namespace satslab {

/// Shape of the micro segmentation transformer.
///
/// Block j (0-based) runs on a (grid_side(j))² token grid; each block halves
/// the grid of the previous one. Every block has the same head count so that
/// per-head attention vectors line up across blocks.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 2;
  std::size_t channels = 3;
  std::size_t num_blocks = 4;
  std::size_t heads = 2;
  std::vector<std::size_t> embed_dims{16, 24, 32, 32};
  std::size_t layers_per_block = 1;
  std::vector<std::size_t> key_reduction{1, 1, 1, 1};
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 5;  // including background
  std::uint64_t init_seed = 0;

  std::size_t grid_side(std::size_t block = 0) const { return (image_size / patch_size) >> block; }
  std::size_t tokens(std::size_t block) const { return grid_side(block) * grid_side(block); }
  std::size_t keys(std::size_t block) const {
    const auto side = grid_side(block) / key_reduction.at(block);
    return side * side;
  }
  std::size_t pixels() const { return image_size * image_size; }
  std::size_t feature_width() const {
    std::size_t w = 0;
    for (auto d : embed_dims) w += d;
    return w;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (image_size == 0 || patch_size == 0 || channels == 0) fail("image_size, patch_size and channels must be positive");
    if (image_size % patch_size) fail("image_size must be divisible by patch_size");
    if (num_blocks == 0) fail("num_blocks must be positive");
    if (heads == 0) fail("heads must be positive");
    if (layers_per_block == 0) fail("layers_per_block must be positive");
    if (mlp_ratio == 0) fail("mlp_ratio must be positive");
    if (num_classes == 0) fail("num_classes must be positive");
    if (embed_dims.size() != num_blocks) fail("embed_dims needs one entry per block");
    if (key_reduction.size() != num_blocks) fail("key_reduction needs one entry per block");
    const std::size_t grid = image_size / patch_size;
    if (num_blocks > 63 || grid % (std::size_t{1} << (num_blocks - 1))) {
      fail("grid side " + std::to_string(grid) + " cannot be halved " + std::to_string(num_blocks - 1) + " times");
    }
    for (std::size_t j = 0; j < num_blocks; ++j) {
      if (embed_dims[j] == 0 || embed_dims[j] % heads) fail("embed_dims[" + std::to_string(j) + "] must be a positive multiple of heads");
      if (key_reduction[j] == 0 || grid_side(j) % key_reduction[j]) {
        fail("key_reduction[" + std::to_string(j) + "] must divide the block grid side " + std::to_string(grid_side(j)));
      }
    }
  }
};

inline io::json to_json(const ModelConfig& c) {
  return io::json{{"image_size", c.image_size},
                  {"patch_size", c.patch_size},
                  {"channels", c.channels},
                  {"num_blocks", c.num_blocks},
                  {"heads", c.heads},
                  {"embed_dims", c.embed_dims},
                  {"layers_per_block", c.layers_per_block},
                  {"key_reduction", c.key_reduction},
                  {"mlp_ratio", c.mlp_ratio},
                  {"num_classes", c.num_classes},
                  {"init_seed", c.init_seed}};
}

/// Missing fields keep their defaults; unknown fields are rejected.
inline ModelConfig model_config_from_json(const io::json& j, const std::string& path = "/model") {
  io::ObjectReader r(j, path);
  ModelConfig c;
  c.image_size = r.get_or("image_size", c.image_size);
  c.patch_size = r.get_or("patch_size", c.patch_size);
  c.channels = r.get_or("channels", c.channels);
  c.num_blocks = r.get_or("num_blocks", c.num_blocks);
  c.heads = r.get_or("heads", c.heads);
  c.embed_dims = r.get_uint_list_or("embed_dims", c.embed_dims);
  c.layers_per_block = r.get_or("layers_per_block", c.layers_per_block);
  c.key_reduction = r.get_uint_list_or("key_reduction", std::vector<std::size_t>(c.num_blocks, 1));
  c.mlp_ratio = r.get_or("mlp_ratio", c.mlp_ratio);
  c.num_classes = r.get_or("num_classes", c.num_classes);
  c.init_seed = r.get_or("init_seed", c.init_seed);
  r.finish();
  c.validate();
  return c;
}

}  // namespace satslab
