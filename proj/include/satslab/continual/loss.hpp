#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "satslab/distill/losses.hpp"
#include "satslab/distill/region_index.hpp"
#include "satslab/error.hpp"
#include "satslab/io/json.hpp"
#include "satslab/model/seg_model.hpp"

namespace satslab::continual {

enum class Pooling { crp, gp, np };
enum class DistillSource { attention, feature, both };

inline const char* to_string(Pooling p) { return p == Pooling::crp ? "crp" : p == Pooling::gp ? "gp" : "np"; }
inline const char* to_string(DistillSource s) {
  return s == DistillSource::attention ? "attention" : s == DistillSource::feature ? "feature" : "both";
}

struct LossConfig {
  double lambda_a = 20.0;
  double lambda_d = 20.0;
  double tau = 0.7;
  bool use_pseudo_labeling = true;
  bool use_attention_loss = true;
  bool use_output_kd = true;
  Pooling pooling = Pooling::crp;
  DistillSource distill_source = DistillSource::attention;
  std::vector<std::size_t> block_subset;  // empty = every block
  bool pseudo_labels_in_regions = true;
  distill::LabelDownsample downsample = distill::LabelDownsample::nearest;

  bool wants_attention() const { return use_attention_loss && lambda_a > 0; }
  bool wants_kd() const { return use_output_kd && lambda_d > 0; }

  void validate(std::size_t num_blocks) const {
    auto fail = [](const std::string& m) { throw ConfigError("loss: " + m); };
    if (!(lambda_a >= 0) || !(lambda_d >= 0)) fail("lambda_a and lambda_d must be nonnegative");
    if (!(tau > 0 && tau < 1)) fail("tau must be in (0, 1)");
    for (auto j : block_subset)
      if (j >= num_blocks) fail("block_subset entry " + std::to_string(j) + " exceeds the model's blocks");
    if (pooling == Pooling::np && distill_source != DistillSource::attention) {
      fail("np pooling applies to attention maps only");
    }
  }
};

inline io::json to_json(const LossConfig& c) {
  return io::json{{"lambda_a", c.lambda_a},
                  {"lambda_d", c.lambda_d},
                  {"tau", c.tau},
                  {"use_pseudo_labeling", c.use_pseudo_labeling},
                  {"use_attention_loss", c.use_attention_loss},
                  {"use_output_kd", c.use_output_kd},
                  {"pooling", to_string(c.pooling)},
                  {"distill_source", to_string(c.distill_source)},
                  {"block_subset", c.block_subset},
                  {"pseudo_labels_in_regions", c.pseudo_labels_in_regions},
                  {"downsample", c.downsample == distill::LabelDownsample::nearest ? "nearest" : "majority"}};
}

inline LossConfig loss_config_from_json(const io::json& j, const std::string& path = "/loss") {
  io::ObjectReader r(j, path);
  LossConfig c;
  c.lambda_a = r.get_or("lambda_a", c.lambda_a);
  c.lambda_d = r.get_or("lambda_d", c.lambda_d);
  c.tau = r.get_or("tau", c.tau);
  c.use_pseudo_labeling = r.get_or("use_pseudo_labeling", c.use_pseudo_labeling);
  c.use_attention_loss = r.get_or("use_attention_loss", c.use_attention_loss);
  c.use_output_kd = r.get_or("use_output_kd", c.use_output_kd);
  if (r.has("pooling")) {
    const auto p = r.get<std::string>("pooling");
    if (p == "crp") c.pooling = Pooling::crp;
    else if (p == "gp") c.pooling = Pooling::gp;
    else if (p == "np") c.pooling = Pooling::np;
    else throw ConfigError(r.where("pooling") + ": expected one of crp, gp, np");
  }
  if (r.has("distill_source")) {
    const auto s = r.get<std::string>("distill_source");
    if (s == "attention") c.distill_source = DistillSource::attention;
    else if (s == "feature") c.distill_source = DistillSource::feature;
    else if (s == "both") c.distill_source = DistillSource::both;
    else throw ConfigError(r.where("distill_source") + ": expected one of attention, feature, both");
  }
  c.block_subset = r.get_uint_list_or("block_subset", c.block_subset);
  c.pseudo_labels_in_regions = r.get_or("pseudo_labels_in_regions", c.pseudo_labels_in_regions);
  if (r.has("downsample")) {
    const auto d = r.get<std::string>("downsample");
    if (d == "nearest") c.downsample = distill::LabelDownsample::nearest;
    else if (d == "majority") c.downsample = distill::LabelDownsample::majority;
    else throw ConfigError(r.where("downsample") + ": expected nearest or majority");
  }
  r.finish();
  return c;
}

/// What the frozen old model contributes for one training image.
template <class T>
struct TeacherTargets {
  Tensor<T> probs;                       // (P, C_old) softmax of old logits
  distill::PooledVectors<T> attention;   // CRP or GP pooled old attention
  distill::PooledVectors<T> features;    // CRP pooled old block features
  AttentionStack<T> full_attention;      // only kept for NP
};

/// One image ready for the combined loss.
template <class T>
struct LossItem {
  std::span<const float> image;
  std::vector<std::uint8_t> labels;  // effective, pseudo-labeled, learned ids
  distill::ClassRegionIndex index;
  const TeacherTargets<T>* teacher = nullptr;  // null at stage 0
};

template <class T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> ce;
  Tensor<T> attention;
  Tensor<T> kd;
};

/// Grid sides of every block of `config`, for build_region_index.
inline std::vector<std::size_t> block_grid_sides(const ModelConfig& config) {
  std::vector<std::size_t> sides;
  for (std::size_t j = 0; j < config.num_blocks; ++j) sides.push_back(config.grid_side(j));
  return sides;
}

/// Computes the old model's contribution for an image whose effective and
/// pseudo-labeled maps are already known.
template <class T>
TeacherTargets<T> teacher_targets(const SegOutput<T>& old_out, const distill::ClassRegionIndex& index,
                                  const LossConfig& cfg) {
  TeacherTargets<T> t;
  t.probs = softmax(old_out.logits.detach());
  if (cfg.wants_attention()) {
    const bool attention = cfg.distill_source != DistillSource::feature;
    const bool feature = cfg.distill_source != DistillSource::attention;
    if (attention && cfg.pooling == Pooling::crp) t.attention = distill::crp_pool(old_out.attention, index, cfg.block_subset);
    if (attention && cfg.pooling == Pooling::gp) t.attention = distill::gp_pool(old_out.attention, cfg.block_subset);
    if (attention && cfg.pooling == Pooling::np) t.full_attention = old_out.attention;
    if (feature) t.features = distill::crp_pool_features(old_out.block_features, index, cfg.block_subset);
  }
  return t;
}

/// L = L_c + λ_a·L_a + λ_d·L_d over a batch.
///
/// L_c and L_d are pixel means over the whole batch (each image's mean is
/// weighted by its count of non-ignored pixels); L_a averages over images
/// with at least one pooled class and over heads. Items without a teacher
/// contribute to L_c only.
template <class T>
LossTerms<T> combined_loss(const SegModel<T>& live, const std::vector<LossItem<T>>& items, const LossConfig& cfg) {
  const std::size_t heads = live.config().heads;
  std::vector<std::size_t> valid(items.size(), 0);
  std::size_t total_valid = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (auto l : items[i].labels) valid[i] += l != distill::kIgnoreLabel;
    total_valid += valid[i];
  }
  std::vector<Tensor<T>> ce_terms, kd_terms;
  std::vector<std::optional<Tensor<T>>> attn_terms, feat_terms;
  bool any_teacher = false;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const auto out = live.forward(it.image);
    if (it.labels.size() != out.logits.dim(0)) throw ConfigError("combined_loss: label map does not match the image");
    std::vector<int> targets(it.labels.begin(), it.labels.end());
    if (total_valid > 0 && valid[i] > 0) {
      const T w = T(valid[i]) / T(total_valid);
      ce_terms.push_back(scale(cross_entropy(out.logits, std::span<const int>(targets)), w));
    }
    if (!it.teacher) continue;
    any_teacher = true;
    const auto& tt = *it.teacher;
    if (cfg.wants_kd() && total_valid > 0 && valid[i] > 0) {
      const T w = T(valid[i]) / T(total_valid);
      kd_terms.push_back(scale(distill::unbiased_kd_from_probs(tt.probs, out.logits, std::span<const std::uint8_t>(it.labels)), w));
    }
    if (cfg.wants_attention()) {
      if (cfg.distill_source != DistillSource::feature) {
        if (cfg.pooling == Pooling::np) {
          attn_terms.push_back(distill::image_np_term(tt.full_attention, out.attention, cfg.block_subset));
        } else {
          auto fresh = cfg.pooling == Pooling::crp ? distill::crp_pool(out.attention, it.index, cfg.block_subset)
                                                   : distill::gp_pool(out.attention, cfg.block_subset);
          attn_terms.push_back(distill::image_transfer_term(tt.attention, fresh));
        }
      }
      if (cfg.distill_source != DistillSource::attention) {
        feat_terms.push_back(distill::image_transfer_term(
            tt.features, distill::crp_pool_features(out.block_features, it.index, cfg.block_subset)));
      }
    }
  }
  auto total_of = [](const std::vector<Tensor<T>>& v) {
    return v.empty() ? Tensor<T>::scalar(T(0)) : distill::detail::sum_all(v);
  };
  LossTerms<T> terms;
  terms.ce = total_of(ce_terms);
  terms.kd = total_of(kd_terms);
  terms.attention = Tensor<T>::scalar(T(0));
  if (any_teacher && cfg.wants_attention()) {
    std::vector<Tensor<T>> parts;
    if (cfg.distill_source != DistillSource::feature) parts.push_back(distill::combine_image_terms(attn_terms, heads));
    if (cfg.distill_source != DistillSource::attention) parts.push_back(distill::combine_image_terms(feat_terms, 1));
    terms.attention = distill::detail::sum_all(parts);
  }
  terms.total = add(add(terms.ce, scale(terms.attention, T(cfg.lambda_a))), scale(terms.kd, T(cfg.lambda_d)));
  return terms;
}

}  // namespace satslab::continual
