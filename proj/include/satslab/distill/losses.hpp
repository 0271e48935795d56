#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "satslab/distill/region_index.hpp"
#include "satslab/error.hpp"
#include "satslab/model/seg_model.hpp"
#include "satslab/tensor/ops.hpp"

namespace satslab::distill {

/// One pooled vector: the mean of the rows of block `block`, head `head`
/// over the region of class `cls`. GP vectors use cls = 0 (the whole grid).
template <class T>
struct PooledEntry {
  std::uint8_t cls = 0;
  std::size_t block = 0;
  std::size_t head = 0;
  Tensor<T> vec;
};

template <class T>
using PooledVectors = std::vector<PooledEntry<T>>;

inline std::vector<std::size_t> all_blocks(std::size_t count) {
  std::vector<std::size_t> b(count);
  std::iota(b.begin(), b.end(), 0);
  return b;
}

namespace detail {

template <class T>
void check_resolution(const AttentionStack<T>& attn, const ClassRegionIndex& index) {
  if (attn.size() != index.blocks.size()) {
    throw InternalError("crp_pool: attention has " + std::to_string(attn.size()) + " blocks, region index has " +
                        std::to_string(index.blocks.size()));
  }
  for (std::size_t j = 0; j < attn.size(); ++j) {
    if (attn[j].grid_side != index.blocks[j].grid_side) {
      throw InternalError("crp_pool: block " + std::to_string(j) + " attention grid " +
                          std::to_string(attn[j].grid_side) + " vs region grid " +
                          std::to_string(index.blocks[j].grid_side));
    }
  }
}

inline std::vector<std::size_t> resolve_blocks(const std::vector<std::size_t>& blocks, std::size_t count) {
  if (blocks.empty()) return all_blocks(count);
  for (auto j : blocks)
    if (j >= count) throw ConfigError("block " + std::to_string(j) + " out of range for " + std::to_string(count) + " blocks");
  return blocks;
}

template <class T>
Tensor<T> squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = sub(a, b);
  return sum(mul(d, d));
}

template <class T>
Tensor<T> sum_all(const std::vector<Tensor<T>>& terms) {
  Tensor<T> total = terms.at(0);
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

}  // namespace detail

/// Class-specific region pooling of attention rows. Entries are ordered by
/// class, then block, then head; classes whose region at a block is empty
/// have no entry for that block.
template <class T>
PooledVectors<T> crp_pool(const AttentionStack<T>& attn, const ClassRegionIndex& index,
                          const std::vector<std::size_t>& blocks = {}) {
  detail::check_resolution(attn, index);
  const auto used = detail::resolve_blocks(blocks, attn.size());
  PooledVectors<T> out;
  for (auto c : index.present_classes(used)) {
    for (auto j : used) {
      const auto it = index.blocks[j].regions.find(c);
      if (it == index.blocks[j].regions.end()) continue;
      for (std::size_t h = 0; h < attn[j].heads.size(); ++h) {
        out.push_back({c, j, h, masked_mean(attn[j].heads[h], std::span<const std::size_t>(it->second))});
      }
    }
  }
  return out;
}

/// Global pooling: one vector per block and head, averaged over every grid
/// location including background.
template <class T>
PooledVectors<T> gp_pool(const AttentionStack<T>& attn, const std::vector<std::size_t>& blocks = {}) {
  const auto used = detail::resolve_blocks(blocks, attn.size());
  PooledVectors<T> out;
  for (auto j : used) {
    std::vector<std::size_t> rows(attn[j].grid_side * attn[j].grid_side);
    std::iota(rows.begin(), rows.end(), 0);
    for (std::size_t h = 0; h < attn[j].heads.size(); ++h) {
      out.push_back({0, j, h, masked_mean(attn[j].heads[h], std::span<const std::size_t>(rows))});
    }
  }
  return out;
}

/// Class-specific region pooling of block feature maps (one "head" per block).
template <class T>
PooledVectors<T> crp_pool_features(const std::vector<Tensor<T>>& features, const ClassRegionIndex& index,
                                   const std::vector<std::size_t>& blocks = {}) {
  if (features.size() != index.blocks.size()) throw InternalError("crp_pool_features: block count mismatch");
  for (std::size_t j = 0; j < features.size(); ++j) {
    const auto g = index.blocks[j].grid_side;
    if (features[j].rank() != 2 || features[j].dim(0) != g * g) {
      throw InternalError("crp_pool_features: block " + std::to_string(j) + " features " +
                          shape_str(features[j].shape()) + " do not match grid side " + std::to_string(g));
    }
  }
  const auto used = detail::resolve_blocks(blocks, features.size());
  PooledVectors<T> out;
  for (auto c : index.present_classes(used)) {
    for (auto j : used) {
      const auto it = index.blocks[j].regions.find(c);
      if (it == index.blocks[j].regions.end()) continue;
      out.push_back({c, j, 0, masked_mean(features[j], std::span<const std::size_t>(it->second))});
    }
  }
  return out;
}

/// Per-image term (1/|C_i|) Σ_c Σ_h Σ_j ‖new − old‖². Gradient reaches only
/// `fresh`. Empty when the image has no pooled classes.
template <class T>
std::optional<Tensor<T>> image_transfer_term(const PooledVectors<T>& old, const PooledVectors<T>& fresh) {
  if (old.size() != fresh.size()) {
    throw InternalError("attention transfer: " + std::to_string(old.size()) + " old vectors vs " +
                        std::to_string(fresh.size()) + " new vectors");
  }
  if (fresh.empty()) return std::nullopt;
  std::vector<Tensor<T>> terms;
  std::set<std::uint8_t> classes;
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    const auto& o = old[i];
    const auto& n = fresh[i];
    if (o.cls != n.cls || o.block != n.block || o.head != n.head || o.vec.shape() != n.vec.shape()) {
      throw InternalError("attention transfer: pooled vector " + std::to_string(i) + " differs in structure");
    }
    classes.insert(n.cls);
    terms.push_back(detail::squared_distance(n.vec, o.vec.detach()));
  }
  return scale(detail::sum_all(terms), T(1) / T(classes.size()));
}

/// Averages per-image terms over the images that have one and divides by the
/// head count: (1/(N·H)) Σ_i term_i. Zero (unrecorded) when N = 0.
template <class T>
Tensor<T> combine_image_terms(const std::vector<std::optional<Tensor<T>>>& terms, std::size_t heads) {
  if (heads == 0) throw UsageError("attention transfer: head count must be positive");
  std::vector<Tensor<T>> present;
  for (const auto& t : terms)
    if (t) present.push_back(*t);
  if (present.empty()) return Tensor<T>::scalar(T(0));
  return scale(detail::sum_all(present), T(1) / (T(present.size()) * T(heads)));
}

/// L_a over a batch of images given old and new pooled vectors per image.
template <class T>
Tensor<T> attention_transfer_loss(const std::vector<PooledVectors<T>>& old, const std::vector<PooledVectors<T>>& fresh,
                                  std::size_t heads) {
  if (old.size() != fresh.size()) throw InternalError("attention transfer: batch sizes differ");
  std::vector<std::optional<Tensor<T>>> terms;
  for (std::size_t i = 0; i < old.size(); ++i) terms.push_back(image_transfer_term(old[i], fresh[i]));
  return combine_image_terms(terms, heads);
}

/// Per-image no-pooling term: Σ_j Σ_h mean over grid locations of the squared
/// distance between old and new attention rows.
template <class T>
Tensor<T> image_np_term(const AttentionStack<T>& old, const AttentionStack<T>& fresh,
                        const std::vector<std::size_t>& blocks = {}) {
  if (old.size() != fresh.size()) throw InternalError("np distillation: block count mismatch");
  const auto used = detail::resolve_blocks(blocks, fresh.size());
  std::vector<Tensor<T>> terms;
  for (auto j : used) {
    if (old[j].heads.size() != fresh[j].heads.size() || old[j].grid_side != fresh[j].grid_side) {
      throw InternalError("np distillation: block " + std::to_string(j) + " structure mismatch");
    }
    for (std::size_t h = 0; h < fresh[j].heads.size(); ++h) {
      const auto& a = fresh[j].heads[h];
      if (a.shape() != old[j].heads[h].shape()) throw InternalError("np distillation: attention shape mismatch");
      terms.push_back(scale(detail::squared_distance(a, old[j].heads[h].detach()), T(1) / T(a.dim(0))));
    }
  }
  return detail::sum_all(terms);
}

/// NP loss over a batch: (1/(N·H)) Σ_i image_np_term.
template <class T>
Tensor<T> np_distill_loss(const std::vector<AttentionStack<T>>& old, const std::vector<AttentionStack<T>>& fresh,
                          std::size_t heads, const std::vector<std::size_t>& blocks = {}) {
  if (old.size() != fresh.size()) throw InternalError("np distillation: batch sizes differ");
  std::vector<std::optional<Tensor<T>>> terms;
  for (std::size_t i = 0; i < old.size(); ++i) terms.push_back(image_np_term(old[i], fresh[i], blocks));
  return combine_image_terms(terms, heads);
}

/// Feature distillation with CRP on block features, normalized like L_a with
/// a single "head".
template <class T>
Tensor<T> feature_distill_loss(const std::vector<std::vector<Tensor<T>>>& old_features,
                               const std::vector<std::vector<Tensor<T>>>& new_features,
                               const std::vector<ClassRegionIndex>& indices, const std::vector<std::size_t>& blocks = {}) {
  if (old_features.size() != new_features.size() || new_features.size() != indices.size()) {
    throw ConfigError("feature distillation: batch sizes differ");
  }
  std::vector<std::optional<Tensor<T>>> terms;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (old_features[i].size() != new_features[i].size()) throw ConfigError("feature distillation: block count mismatch");
    for (std::size_t j = 0; j < new_features[i].size(); ++j) {
      if (old_features[i][j].shape() != new_features[i][j].shape()) {
        throw ConfigError("feature distillation: block " + std::to_string(j) + " shapes " +
                          shape_str(old_features[i][j].shape()) + " and " + shape_str(new_features[i][j].shape()));
      }
    }
    terms.push_back(image_transfer_term(crp_pool_features(old_features[i], indices[i], blocks),
                                        crp_pool_features(new_features[i], indices[i], blocks)));
  }
  return combine_image_terms(terms, 1);
}

/// Unbiased output distillation against old-model probabilities.
///
/// new_logits is (P, C_new); old_probs is (P, C_old) with C_old ≤ C_new. The
/// new model's background and every class id ≥ C_old are summed into one
/// background probability before the soft cross-entropy
/// −Σ_c p_old(c)·log q'(c). Pixels whose label is the ignore id are skipped;
/// `labels` may be empty to keep every pixel. Returns the mean over kept
/// pixels (0 when none).
template <class T>
Tensor<T> unbiased_kd_from_probs(const Tensor<T>& old_probs, const Tensor<T>& new_logits,
                                 std::span<const std::uint8_t> labels = {}) {
  if (old_probs.rank() != 2 || new_logits.rank() != 2 || old_probs.dim(0) != new_logits.dim(0)) {
    throw ConfigError("unbiased_kd: old " + shape_str(old_probs.shape()) + " and new " + shape_str(new_logits.shape()) +
                      " do not line up");
  }
  const std::size_t p = new_logits.dim(0), cn = new_logits.dim(1), co = old_probs.dim(1);
  if (co > cn) {
    throw UsageError("unbiased_kd: old class count " + std::to_string(co) + " exceeds new class count " +
                     std::to_string(cn));
  }
  if (!labels.empty() && labels.size() != p) throw ConfigError("unbiased_kd: label count does not match pixel count");
  auto group = [co](std::size_t k) { return (k == 0 || k >= co) ? std::size_t{0} : k; };

  const T* x = new_logits.data().data();
  const T* po = old_probs.data().data();
  std::vector<T> lse_group(p * co);
  std::vector<T> lse_all(p);
  std::vector<std::size_t> kept;
  T total = 0;
  std::vector<T> gmax(co);
  for (std::size_t i = 0; i < p; ++i) {
    if (!labels.empty() && labels[i] == kIgnoreLabel) continue;
    kept.push_back(i);
    const T* xi = x + i * cn;
    std::fill(gmax.begin(), gmax.end(), -std::numeric_limits<T>::infinity());
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < cn; ++k) {
      gmax[group(k)] = std::max(gmax[group(k)], xi[k]);
      mx = std::max(mx, xi[k]);
    }
    std::vector<T> gs(co, T(0));
    T s = 0;
    for (std::size_t k = 0; k < cn; ++k) {
      gs[group(k)] += std::exp(xi[k] - gmax[group(k)]);
      s += std::exp(xi[k] - mx);
    }
    lse_all[i] = mx + std::log(s);
    T li = 0;
    for (std::size_t c = 0; c < co; ++c) {
      lse_group[i * co + c] = gmax[c] + std::log(gs[c]);
      li -= po[i * co + c] * (lse_group[i * co + c] - lse_all[i]);
    }
    total += li;
  }
  const std::size_t n = kept.size();
  Tensor<T> out = Tensor<T>::scalar(n ? total / T(n) : T(0));
  if (!satslab::detail::should_record<T>({&new_logits})) return out;
  auto il = new_logits.impl();
  auto ip = old_probs.impl();
  return satslab::detail::attach<T>(
      out, "unbiased_kd", {il},
      [il, ip, cn, co, group, kept = std::move(kept), lse_group = std::move(lse_group),
       lse_all = std::move(lse_all)](const std::vector<T>& g) {
        if (kept.empty()) return;
        auto& gl = il->grad_buffer();
        const T k0 = g[0] / T(kept.size());
        for (auto i : kept) {
          const T* xi = il->data.data() + i * cn;
          const T* pi = ip->data.data() + i * co;
          T mass = 0;
          for (std::size_t c = 0; c < co; ++c) mass += pi[c];
          for (std::size_t k = 0; k < cn; ++k) {
            const std::size_t c = group(k);
            const T d = -pi[c] * std::exp(xi[k] - lse_group[i * co + c]) + mass * std::exp(xi[k] - lse_all[i]);
            gl[i * cn + k] += k0 * d;
          }
        }
      });
}

/// Same as unbiased_kd_from_probs with p_old = softmax(old_logits); the old
/// side never receives gradient.
template <class T>
Tensor<T> unbiased_kd_loss(const Tensor<T>& old_logits, const Tensor<T>& new_logits, std::size_t old_class_count,
                           std::span<const std::uint8_t> labels = {}) {
  if (old_logits.rank() != 2 || old_logits.dim(1) != old_class_count) {
    throw ConfigError("unbiased_kd: old logits " + shape_str(old_logits.shape()) + " do not have " +
                      std::to_string(old_class_count) + " classes");
  }
  if (new_logits.rank() == 2 && old_class_count > new_logits.dim(1)) {
    throw UsageError("unbiased_kd: old class count " + std::to_string(old_class_count) + " exceeds new class count " +
                     std::to_string(new_logits.dim(1)));
  }
  return unbiased_kd_from_probs(softmax(old_logits.detach()), new_logits, labels);
}

}  // namespace satslab::distill
