#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "satslab/io/files.hpp"
#include "satslab/model/config.hpp"
#include "satslab/tensor/ops.hpp"
#include "satslab/tensor/snapshot.hpp"

namespace satslab {

/// Post-softmax attention of every head of one block's last attention layer.
/// heads[h] has shape (grid_side², keys): row (u·grid_side + v) is the
/// distribution of query (u,v) over the block's keys.
template <class T>
struct BlockAttention {
  std::size_t grid_side = 0;
  std::size_t keys = 0;
  std::vector<Tensor<T>> heads;
};

template <class T>
using AttentionStack = std::vector<BlockAttention<T>>;

template <class T>
struct SegOutput {
  /// (image_size², num_classes) per-pixel scores, pixels in row-major (y,x)
  /// order.
  Tensor<T> logits;
  AttentionStack<T> attention;
  /// Per-block (grid_side(j)², embed_dims[j]) normalized feature maps.
  std::vector<Tensor<T>> block_features;
};

/// Verifies the attention-row invariants; throws InternalError on failure.
template <class T>
void check_attention_stack(const AttentionStack<T>& stack, double tol = 1e-5) {
  for (std::size_t j = 0; j < stack.size(); ++j) {
    for (std::size_t h = 0; h < stack[j].heads.size(); ++h) {
      const auto& a = stack[j].heads[h];
      const std::size_t k = a.dim(1);
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < k; ++c) {
          const double v = a.at(r, c);
          if (!(v >= 0.0 && v <= 1.0)) {
            throw InternalError("attention entry outside [0,1] at block " + std::to_string(j) + " head " + std::to_string(h));
          }
          s += v;
        }
        if (std::abs(s - 1.0) > tol) {
          throw InternalError("attention row does not sum to 1 at block " + std::to_string(j) + " head " + std::to_string(h));
        }
      }
    }
  }
}

namespace detail {

template <class T>
struct AttentionLayer {
  Tensor<T> ln1_g, ln1_b;
  std::vector<Tensor<T>> w_q, w_k, w_v;  // one (D, D/H) projection per head
  Tensor<T> w_o, b_o;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w_1, b_1, w_2, b_2;
};

template <class T>
struct EncoderBlock {
  std::vector<AttentionLayer<T>> layers;
  Tensor<T> norm_g, norm_b;
  Tensor<T> merge_w, merge_b;  // undefined for the last block
};

/// Config-derived index tables shared by all forwards.
template <class T>
struct Geometry {
  std::vector<Tensor<T>> key_pool;                            // per block, (keys, tokens) or undefined
  std::vector<std::array<std::vector<std::size_t>, 4>> merge;  // block j -> j+1 quadrant gathers
  std::vector<std::vector<std::size_t>> upsample;             // block j -> block-0 grid
  std::vector<std::size_t> pixel_to_token;                    // pixel -> block-0 token
};

}  // namespace detail

/// Micro pyramid vision transformer for semantic segmentation.
///
/// Patch embedding is a linear map of each non-overlapping patch plus a
/// learned position embedding. Each block holds pre-norm transformer layers
/// (multi-head attention with optional r×r key pooling, GELU MLP) followed by
/// a layer norm; consecutive blocks are joined by 2×2 patch merging. The
/// decoder is a per-pixel linear classifier over the concatenation of all
/// block features, nearest-upsampled to full resolution.
template <class T>
class SegModel {
 public:
  explicit SegModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    build_geometry();
    init_parameters();
  }
  SegModel(SegModel&&) noexcept = default;
  SegModel& operator=(SegModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::size_t num_classes() const { return config_.num_classes; }

  /// Runs the network on one (image_size, image_size, channels) image in
  /// row-major HWC order. Records onto the active tape (if any) when the
  /// parameters require gradients.
  SegOutput<T> forward(std::span<const T> image) const {
    const auto& c = config_;
    const std::size_t expected = c.pixels() * c.channels;
    if (image.size() != expected) {
      throw ConfigError("forward: image has " + std::to_string(image.size()) + " values, model expects " +
                        std::to_string(expected) + " (" + std::to_string(c.image_size) + "x" +
                        std::to_string(c.image_size) + "x" + std::to_string(c.channels) + ")");
    }
    SegOutput<T> out;
    Tensor<T> x = add(add_bias(matmul(patchify(image), patch_w_), patch_b_), pos_embed_);

    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      const auto& block = blocks_[j];
      BlockAttention<T> attn{c.grid_side(j), c.keys(j), {}};
      for (std::size_t l = 0; l < block.layers.size(); ++l) {
        const bool last = l + 1 == block.layers.size();
        x = layer_forward(block.layers[l], x, j, last ? &attn.heads : nullptr);
      }
      x = layer_norm(x, block.norm_g, block.norm_b);
      out.block_features.push_back(x);
      out.attention.push_back(std::move(attn));
      if (j + 1 < c.num_blocks) {
        const auto& q = geometry_->merge[j];
        auto merged = concat_cols<T>({gather_rows(x, std::span<const std::size_t>(q[0])),
                                      gather_rows(x, std::span<const std::size_t>(q[1])),
                                      gather_rows(x, std::span<const std::size_t>(q[2])),
                                      gather_rows(x, std::span<const std::size_t>(q[3]))});
        x = add_bias(matmul(merged, block.merge_w), block.merge_b);
      }
    }

    std::vector<Tensor<T>> upsampled;
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      upsampled.push_back(j == 0 ? out.block_features[0]
                                 : gather_rows(out.block_features[j], std::span<const std::size_t>(geometry_->upsample[j])));
    }
    auto token_logits = add_bias(matmul(concat_cols(upsampled), decoder_w_), decoder_b_);
    out.logits = gather_rows(token_logits, std::span<const std::size_t>(geometry_->pixel_to_token));
#ifdef SATSLAB_CHECK_INVARIANTS
    check_attention_stack(out.attention);
#endif
    return out;
  }

  SegOutput<T> forward(std::span<const float> image) const
    requires(!std::is_same_v<T, float>)
  {
    std::vector<T> converted(image.begin(), image.end());
    return forward(std::span<const T>(converted));
  }

  /// Grows the decoder to `new_class_count` outputs. Existing columns are
  /// untouched; new weight columns are drawn from N(0, 0.01²) with `seed`,
  /// new biases start at zero.
  void expand_head(std::size_t new_class_count, std::uint64_t seed) {
    const std::size_t old_count = config_.num_classes;
    if (new_class_count <= old_count) {
      throw UsageError("expand_head: new class count " + std::to_string(new_class_count) +
                       " must exceed current count " + std::to_string(old_count));
    }
    const std::size_t rows = decoder_w_.dim(0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.01);
    std::vector<T> w(rows * new_class_count);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < old_count; ++k) w[r * new_class_count + k] = decoder_w_.at(r, k);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = old_count; k < new_class_count; ++k) w[r * new_class_count + k] = static_cast<T>(normal(rng));
    }
    std::vector<T> b(new_class_count, T(0));
    for (std::size_t k = 0; k < old_count; ++k) b[k] = decoder_b_[k];
    const bool trainable = decoder_w_.requires_grad();
    decoder_w_ = Tensor<T>({rows, new_class_count}, std::move(w), trainable);
    decoder_b_ = Tensor<T>({new_class_count}, std::move(b), trainable);
    config_.num_classes = new_class_count;
  }

  /// Independent deep copy; training one never affects the other.
  SegModel clone() const {
    SegModel copy(*this);
    copy.visit([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return copy;
  }

  void set_trainable(bool flag) {
    visit([flag](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); });
  }

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    const_cast<SegModel*>(this)->visit([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
  }

  /// Replaces every parameter by the same-named tensor from `tensors`.
  void load_parameters(const NamedTensors<T>& tensors) {
    std::size_t idx = 0;
    visit([&](const std::string& name, Tensor<T>& t) {
      if (idx >= tensors.size() || tensors[idx].first != name) {
        throw DataError("parameter file does not match model layout at '" + name + "'");
      }
      const auto& src = tensors[idx++].second;
      if (src.shape() != t.shape()) {
        throw DataError("parameter '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                        shape_str(t.shape()));
      }
      t = Tensor<T>(src.shape(), src.vec(), t.requires_grad());
    });
    if (idx != tensors.size()) throw DataError("parameter file has extra tensors");
  }

  /// Writes `<stem>.bin` (parameter snapshot) and `<stem>.json` (config).
  void save(const std::filesystem::path& stem) const {
    save_snapshot(std::filesystem::path(stem).replace_extension(".bin"), named_parameters());
    io::write_text(std::filesystem::path(stem).replace_extension(".json"), to_json(config_).dump(2) + "\n");
  }

  static SegModel load(const std::filesystem::path& stem) {
    auto cfg = model_config_from_json(
        io::parse_json(io::read_text(std::filesystem::path(stem).replace_extension(".json")), stem.string()), "");
    SegModel m(cfg);
    m.load_parameters(load_snapshot<T>(std::filesystem::path(stem).replace_extension(".bin")));
    return m;
  }

 private:
  // Copies share parameter storage; clone() is the public deep copy.
  SegModel(const SegModel&) = default;

  template <class F>
  void visit(F&& f) {
    f("patch_embed.w", patch_w_);
    f("patch_embed.b", patch_b_);
    f("pos_embed", pos_embed_);
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      auto& b = blocks_[j];
      const std::string bp = "block" + std::to_string(j);
      for (std::size_t l = 0; l < b.layers.size(); ++l) {
        auto& L = b.layers[l];
        const std::string lp = bp + ".layer" + std::to_string(l);
        f(lp + ".ln1.g", L.ln1_g);
        f(lp + ".ln1.b", L.ln1_b);
        for (std::size_t h = 0; h < L.w_q.size(); ++h) {
          const std::string hs = ".h" + std::to_string(h);
          f(lp + ".attn.q" + hs, L.w_q[h]);
          f(lp + ".attn.k" + hs, L.w_k[h]);
          f(lp + ".attn.v" + hs, L.w_v[h]);
        }
        f(lp + ".attn.o.w", L.w_o);
        f(lp + ".attn.o.b", L.b_o);
        f(lp + ".ln2.g", L.ln2_g);
        f(lp + ".ln2.b", L.ln2_b);
        f(lp + ".mlp.fc1.w", L.w_1);
        f(lp + ".mlp.fc1.b", L.b_1);
        f(lp + ".mlp.fc2.w", L.w_2);
        f(lp + ".mlp.fc2.b", L.b_2);
      }
      f(bp + ".norm.g", b.norm_g);
      f(bp + ".norm.b", b.norm_b);
      if (b.merge_w.defined()) {
        f(bp + ".merge.w", b.merge_w);
        f(bp + ".merge.b", b.merge_b);
      }
    }
    f("decoder.w", decoder_w_);
    f("decoder.b", decoder_b_);
  }

  Tensor<T> patchify(std::span<const T> image) const {
    const auto& c = config_;
    const std::size_t g = c.grid_side(0), p = c.patch_size, ch = c.channels;
    const std::size_t width = p * p * ch;
    std::vector<T> rows(g * g * width);
    for (std::size_t u = 0; u < g; ++u)
      for (std::size_t v = 0; v < g; ++v) {
        T* dst = rows.data() + (u * g + v) * width;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t k = 0; k < ch; ++k)
              *dst++ = (image[((u * p + dy) * c.image_size + (v * p + dx)) * ch + k] - T(0.5)) * T(4);
      }
    return Tensor<T>({g * g, width}, std::move(rows));
  }

  Tensor<T> layer_forward(const detail::AttentionLayer<T>& L, const Tensor<T>& x, std::size_t block,
                          std::vector<Tensor<T>>* keep_attention) const {
    const std::size_t heads = config_.heads;
    const T inv_sqrt = T(1) / std::sqrt(T(config_.embed_dims[block] / heads));
    auto xn = layer_norm(x, L.ln1_g, L.ln1_b);
    const auto& pool = geometry_->key_pool[block];
    auto kv_in = pool.defined() ? matmul(pool, xn) : xn;
    std::vector<Tensor<T>> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto q = matmul(xn, L.w_q[h]);
      auto k = matmul(kv_in, L.w_k[h]);
      auto v = matmul(kv_in, L.w_v[h]);
      auto a = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
      head_out.push_back(matmul(a, v));
      if (keep_attention) keep_attention->push_back(a);
    }
    auto y = add(x, add_bias(matmul(concat_cols(head_out), L.w_o), L.b_o));
    auto hidden = gelu(add_bias(matmul(layer_norm(y, L.ln2_g, L.ln2_b), L.w_1), L.b_1));
    return add(y, add_bias(matmul(hidden, L.w_2), L.b_2));
  }

  void build_geometry() {
    const auto& c = config_;
    auto geo = std::make_shared<detail::Geometry<T>>();
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      const std::size_t g = c.grid_side(j), r = c.key_reduction[j];
      if (r == 1) {
        geo->key_pool.emplace_back();
      } else {
        // Average over r×r neighbourhoods as a (keys, tokens) matrix.
        const std::size_t gk = g / r;
        std::vector<T> m(gk * gk * g * g, T(0));
        const T w = T(1) / T(r * r);
        for (std::size_t u = 0; u < g; ++u)
          for (std::size_t v = 0; v < g; ++v) m[((u / r) * gk + v / r) * g * g + u * g + v] = w;
        geo->key_pool.emplace_back(Shape{gk * gk, g * g}, std::move(m));
      }
      if (j + 1 < c.num_blocks) {
        const std::size_t gn = g / 2;
        std::array<std::vector<std::size_t>, 4> q;
        for (std::size_t u = 0; u < gn; ++u)
          for (std::size_t v = 0; v < gn; ++v)
            for (std::size_t d = 0; d < 4; ++d) q[d].push_back((2 * u + d / 2) * g + 2 * v + d % 2);
        geo->merge.push_back(std::move(q));
      }
      std::vector<std::size_t> up;
      const std::size_t g0 = c.grid_side(0);
      for (std::size_t u = 0; u < g0; ++u)
        for (std::size_t v = 0; v < g0; ++v) up.push_back((u >> j) * g + (v >> j));
      geo->upsample.push_back(std::move(up));
    }
    const std::size_t g0 = c.grid_side(0);
    for (std::size_t y = 0; y < c.image_size; ++y)
      for (std::size_t x = 0; x < c.image_size; ++x)
        geo->pixel_to_token.push_back((y / c.patch_size) * g0 + x / c.patch_size);
    geometry_ = std::move(geo);
  }

  void init_parameters() {
    const auto& c = config_;
    std::mt19937_64 rng(c.init_seed);
    auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(fan_in + fan_out)));
      std::vector<T> v(fan_in * fan_out);
      for (auto& x : v) x = static_cast<T>(normal(rng));
      return Tensor<T>({fan_in, fan_out}, std::move(v), true);
    };
    auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
    auto ones = [](std::size_t n) { return Tensor<T>(Shape{n}, std::vector<T>(n, T(1)), true); };

    const std::size_t d0 = c.embed_dims[0];
    patch_w_ = xavier(c.patch_size * c.patch_size * c.channels, d0);
    patch_b_ = zeros(d0);
    {
      std::normal_distribution<double> normal(0.0, 0.02);
      std::vector<T> v(c.tokens(0) * d0);
      for (auto& x : v) x = static_cast<T>(normal(rng));
      pos_embed_ = Tensor<T>({c.tokens(0), d0}, std::move(v), true);
    }
    blocks_.clear();
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      const std::size_t d = c.embed_dims[j], dh = d / c.heads, hidden = d * c.mlp_ratio;
      detail::EncoderBlock<T> b;
      for (std::size_t l = 0; l < c.layers_per_block; ++l) {
        detail::AttentionLayer<T> L;
        L.ln1_g = ones(d);
        L.ln1_b = zeros(d);
        for (std::size_t h = 0; h < c.heads; ++h) {
          L.w_q.push_back(xavier(d, dh));
          L.w_k.push_back(xavier(d, dh));
          L.w_v.push_back(xavier(d, dh));
        }
        L.w_o = xavier(d, d);
        L.b_o = zeros(d);
        L.ln2_g = ones(d);
        L.ln2_b = zeros(d);
        L.w_1 = xavier(d, hidden);
        L.b_1 = zeros(hidden);
        L.w_2 = xavier(hidden, d);
        L.b_2 = zeros(d);
        b.layers.push_back(std::move(L));
      }
      b.norm_g = ones(d);
      b.norm_b = zeros(d);
      if (j + 1 < c.num_blocks) {
        b.merge_w = xavier(4 * d, c.embed_dims[j + 1]);
        b.merge_b = zeros(c.embed_dims[j + 1]);
      }
      blocks_.push_back(std::move(b));
    }
    decoder_w_ = xavier(c.feature_width(), c.num_classes);
    decoder_b_ = zeros(c.num_classes);
  }

  ModelConfig config_;
  std::shared_ptr<const detail::Geometry<T>> geometry_;
  Tensor<T> patch_w_, patch_b_, pos_embed_;
  std::vector<detail::EncoderBlock<T>> blocks_;
  Tensor<T> decoder_w_, decoder_b_;
};

/// Read-only copy of a model taken at the end of a learning stage.
template <class T>
class FrozenModel {
 public:
  explicit FrozenModel(const SegModel<T>& live) : model_(live.clone()) { model_.set_trainable(false); }

  SegOutput<T> forward(std::span<const T> image) const { return model_.forward(image); }
  SegOutput<T> forward(std::span<const float> image) const
    requires(!std::is_same_v<T, float>)
  {
    return model_.forward(image);
  }

  const SegModel<T>& model() const { return model_; }
  std::size_t num_classes() const { return model_.num_classes(); }

 private:
  SegModel<T> model_;
};

template <class T>
FrozenModel<T> snapshot(const SegModel<T>& live) {
  return FrozenModel<T>(live);
}

}  // namespace satslab
