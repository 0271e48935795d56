#pragma once

// Class-incremental schedule, overlapped relabeling, pseudo-labeling and the
// exemplar memory.
//
// Two label spaces meet here. Dataset ids are the generator's class ids
// (1..C). Learned ids number foreground classes in the order the protocol
// learns them: the class at position k of class_order has learned id k+1.
// Models, region indices and metrics all work in learned ids.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "satslab/data/synth.hpp"
#include "satslab/distill/region_index.hpp"
#include "satslab/error.hpp"
#include "satslab/tensor/tensor.hpp"

namespace satslab::continual {

inline constexpr std::uint8_t kIgnore = distill::kIgnoreLabel;

enum class Split { train, eval };

struct ProtocolPlan {
  std::size_t m = 4;  // classes learned at stage 0
  std::size_t n = 2;  // classes per later stage
  std::size_t stage_count = 2;
  std::vector<std::uint8_t> class_order{1, 2, 3, 4, 5, 6};  // dataset ids; size = total foreground classes
  double lr_initial = 0.01;
  double lr_incremental = 0.001;
  double lr_decay = 0.9;  // per epoch
  std::size_t epochs_initial = 10;
  std::size_t epochs_incremental = 10;
  std::size_t batch_size = 8;
  double momentum = 0.9;
  std::size_t memory_size = 0;
  bool select_best_epoch = true;

  std::size_t total_classes() const { return class_order.size(); }
  /// Foreground classes learned by the end of stage t.
  std::size_t learned_count(std::size_t t) const { return m + n * t; }
  /// Output width of the model head at stage t (background included).
  std::size_t head_size(std::size_t t) const { return 1 + learned_count(t); }
  /// Learned ids introduced at stage t, as the half-open range [first, last).
  std::pair<std::size_t, std::size_t> stage_range(std::size_t t) const {
    return t == 0 ? std::pair<std::size_t, std::size_t>{1, 1 + m} : std::pair{1 + m + n * (t - 1), 1 + m + n * t};
  }
  double stage_lr(std::size_t t, std::size_t epoch) const {
    double lr = t == 0 ? lr_initial : lr_incremental;
    for (std::size_t e = 0; e < epoch; ++e) lr *= lr_decay;
    return lr;
  }
  std::size_t stage_epochs(std::size_t t) const { return t == 0 ? epochs_initial : epochs_incremental; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("protocol: " + msg); };
    if (class_order.empty()) fail("class_order must not be empty");
    if (class_order.size() >= 255) fail("too many classes");
    std::vector<std::uint8_t> sorted = class_order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i + 1) fail("class_order must be a permutation of 1.." + std::to_string(sorted.size()));
    }
    if (m == 0) fail("m must be positive");
    if (stage_count == 0) fail("stage_count must be positive");
    if (stage_count > 1 && n == 0) fail("n must be positive when there is more than one stage");
    if (m + n * (stage_count - 1) > total_classes()) {
      fail("m + n*(stage_count-1) = " + std::to_string(m + n * (stage_count - 1)) + " exceeds the " +
           std::to_string(total_classes()) + " foreground classes");
    }
    if (!(lr_initial >= 0) || !(lr_incremental >= 0)) fail("learning rates must be nonnegative");
    if (!(lr_decay > 0 && lr_decay <= 1)) fail("lr_decay must be in (0, 1]");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (batch_size == 0) fail("batch_size must be positive");
    if (epochs_initial == 0 || (stage_count > 1 && epochs_incremental == 0)) fail("epoch counts must be positive");
  }

  /// Dataset id → learned id lookup (index 0 maps background to 0).
  std::vector<std::uint8_t> learned_ids() const {
    std::vector<std::uint8_t> map(total_classes() + 1, 0);
    for (std::size_t k = 0; k < class_order.size(); ++k) map[class_order[k]] = static_cast<std::uint8_t>(k + 1);
    return map;
  }
};

/// Maps an original (dataset id) label map to the stage's effective map in
/// learned ids. train: only classes introduced at `stage` stay foreground.
/// eval: every class learned up to and including `stage` stays foreground.
inline std::vector<std::uint8_t> relabel_for_stage(std::span<const std::uint8_t> labels, std::size_t stage,
                                                   const ProtocolPlan& plan, Split split) {
  if (stage >= plan.stage_count) throw UsageError("relabel_for_stage: stage " + std::to_string(stage) + " out of range");
  const auto ids = plan.learned_ids();
  const auto [first, last] = plan.stage_range(stage);
  const std::size_t keep_from = split == Split::train ? first : 1;
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto d = labels[i];
    if (d == kIgnore) {
      out[i] = kIgnore;
      continue;
    }
    if (d >= ids.size()) {
      throw DataError("relabel_for_stage: class id " + std::to_string(d) + " at pixel " + std::to_string(i) +
                      " is not in the protocol's " + std::to_string(plan.total_classes()) + " classes");
    }
    const auto l = ids[d];
    out[i] = (l >= keep_from && l < last) ? l : 0;
  }
  return out;
}

/// Relabels confident old-class predictions inside the background of an
/// effective map. old_probs is (P, C_old): a background pixel whose argmax
/// is an old foreground class becomes that class when its probability is at
/// least tau, and the ignore id otherwise. Other pixels are untouched.
template <class T>
std::vector<std::uint8_t> pseudo_label(std::span<const std::uint8_t> effective, const Tensor<T>& old_probs, double tau) {
  if (!(tau > 0 && tau < 1)) throw ConfigError("pseudo_label: tau must be in (0, 1)");
  if (old_probs.rank() != 2 || old_probs.dim(0) != effective.size()) {
    throw ConfigError("pseudo_label: probabilities " + shape_str(old_probs.shape()) + " for " +
                      std::to_string(effective.size()) + " pixels");
  }
  const std::size_t c = old_probs.dim(1);
  std::vector<std::uint8_t> out(effective.begin(), effective.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] != 0) continue;
    const T* p = old_probs.data().data() + i * c;
    const std::size_t k = static_cast<std::size_t>(std::max_element(p, p + c) - p);
    if (k == 0) continue;
    out[i] = double(p[k]) >= tau ? static_cast<std::uint8_t>(k) : kIgnore;
  }
  return out;
}

struct MemoryEntry {
  data::Sample sample;     // image and original label map
  std::uint8_t class_tag;  // learned id the entry was stored for
};

/// Capacity-bounded exemplar store balanced across old classes.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  std::size_t count(std::uint8_t tag) const {
    return std::size_t(std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.class_tag == tag; }));
  }
  bool contains_sample(std::uint32_t id) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.sample.id == id; });
  }

  /// Quota of each old class 1..old_classes: floor(M/K), plus one for the
  /// lowest (M mod K) ids.
  static std::vector<std::size_t> quotas(std::size_t capacity, std::size_t old_classes) {
    std::vector<std::size_t> q(old_classes + 1, 0);
    if (old_classes == 0) return q;
    for (std::size_t c = 1; c <= old_classes; ++c) q[c] = capacity / old_classes + (c - 1 < capacity % old_classes ? 1 : 0);
    return q;
  }

  /// Rebalances after a stage. `old_classes` is the number of learned
  /// foreground classes after the stage (learned ids 1..old_classes);
  /// `finished` lists the learned ids just completed, filled from
  /// `stage_samples` (original labels, dataset ids) via `plan`.
  void update(const std::vector<const data::Sample*>& stage_samples, const std::vector<std::uint8_t>& finished,
              std::size_t old_classes, const ProtocolPlan& plan, std::mt19937_64& rng) {
    if (capacity_ == 0) return;
    const auto quota = quotas(capacity_, old_classes);
    // Evict from classes above their quota.
    std::vector<MemoryEntry> kept;
    for (std::size_t c = 1; c <= old_classes; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].class_tag == c) idx.push_back(i);
      if (idx.size() > quota[c]) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(quota[c]);
        std::sort(idx.begin(), idx.end());
      }
      for (auto i : idx) kept.push_back(std::move(entries_[i]));
    }
    entries_ = std::move(kept);
    // Fill the finished classes.
    const auto ids = plan.learned_ids();
    for (auto c : finished) {
      std::vector<const data::Sample*> candidates;
      for (const auto* s : stage_samples) {
        if (contains_sample(s->id)) continue;
        const bool has = std::any_of(s->labels.begin(), s->labels.end(),
                                     [&](std::uint8_t d) { return d < ids.size() && ids[d] == c; });
        if (has) candidates.push_back(s);
      }
      std::shuffle(candidates.begin(), candidates.end(), rng);
      const std::size_t take = std::min(candidates.size(), quota.at(c));
      if (take < quota[c]) {
        warnings_.push_back("memory: class " + std::to_string(c) + " has " + std::to_string(candidates.size()) +
                            " available images for a quota of " + std::to_string(quota[c]));
      }
      for (std::size_t i = 0; i < take; ++i) entries_.push_back({*candidates[i], c});
    }
  }

 private:
  std::size_t capacity_;
  std::vector<MemoryEntry> entries_;
  std::vector<std::string> warnings_;
};

}  // namespace satslab::continual
