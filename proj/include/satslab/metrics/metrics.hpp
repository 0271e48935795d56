#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "satslab/error.hpp"
#include "satslab/io/json.hpp"

namespace satslab::metrics {

inline constexpr std::uint8_t kIgnore = 255;

/// Square count matrix indexed [truth][prediction] over learned ids 0..n-1.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw UsageError("confusion matrix needs at least one class");
  }

  std::size_t num_classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * n_ + pred); }

  void accumulate(std::span<const std::uint8_t> prediction, std::span<const std::uint8_t> truth) {
    if (prediction.size() != truth.size()) {
      throw InternalError("accumulate: prediction has " + std::to_string(prediction.size()) + " pixels, labels have " +
                          std::to_string(truth.size()));
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == kIgnore) continue;
      if (truth[i] >= n_ || prediction[i] >= n_) {
        throw InternalError("accumulate: id out of range (truth " + std::to_string(truth[i]) + ", prediction " +
                            std::to_string(prediction[i]) + ", classes " + std::to_string(n_) + ")");
      }
      ++counts_[truth[i] * n_ + prediction[i]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw InternalError("merge: confusion matrices differ in size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t true_positives(std::size_t c) const { return at(c, c); }
  std::uint64_t false_positives(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < n_; ++t)
      if (t != c) s += at(t, c);
    return s;
  }
  std::uint64_t false_negatives(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < n_; ++p)
      if (p != c) s += at(c, p);
    return s;
  }

  /// Empty when the class is absent from both prediction and truth.
  std::optional<double> iou(std::size_t c) const {
    const auto tp = true_positives(c), fp = false_positives(c), fn = false_negatives(c);
    const auto denom = tp + fp + fn;
    if (denom == 0) return std::nullopt;
    return double(tp) / double(denom);
  }

  double pixel_accuracy() const {
    const auto t = total();
    if (t == 0) throw UsageError("pixel_accuracy: empty confusion matrix");
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < n_; ++c) diag += at(c, c);
    return double(diag) / double(t);
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

/// Mean of the present values; empty when none are present.
inline std::optional<double> mean_present(const std::vector<std::optional<double>>& values) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      s += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

struct ClassIou {
  std::size_t class_id;  // learned id (0 = background)
  std::string class_name;
  std::uint64_t tp, fp, fn;
  std::optional<double> iou;
};

struct MetricsReport {
  std::size_t stage = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<ClassIou> classes;
  std::optional<double> miou_initial, miou_incremental, miou_all;
  double pixel_accuracy = 0;
};

/// `initial_count` learned ids (background plus the stage-0 classes) form the
/// initial group; ids from initial_count upward are incremental.
inline MetricsReport make_report(const ConfusionMatrix& cm, std::size_t initial_count, std::size_t stage,
                                 const std::vector<std::string>& class_names = {}) {
  if (cm.total() == 0) throw UsageError("report: empty confusion matrix");
  if (initial_count == 0 || initial_count > cm.num_classes()) throw UsageError("report: bad initial group size");
  MetricsReport r;
  r.stage = stage;
  r.pixel_accuracy = cm.pixel_accuracy();
  std::vector<std::optional<double>> init, incr, all;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    ClassIou ci{c,
                c < class_names.size() ? class_names[c] : (c == 0 ? "background" : "class" + std::to_string(c)),
                cm.true_positives(c),
                cm.false_positives(c),
                cm.false_negatives(c),
                cm.iou(c)};
    (c < initial_count ? init : incr).push_back(ci.iou);
    all.push_back(ci.iou);
    r.classes.push_back(std::move(ci));
  }
  r.miou_initial = mean_present(init);
  r.miou_incremental = mean_present(incr);
  r.miou_all = mean_present(all);
  return r;
}

inline io::json optional_json(const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); }

inline io::json to_json(const MetricsReport& r) {
  io::json classes = io::json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class_id", c.class_id},
                       {"class_name", c.class_name},
                       {"TP", c.tp},
                       {"FP", c.fp},
                       {"FN", c.fn},
                       {"IoU", optional_json(c.iou)}});
  }
  return io::json{{"stage", r.stage},
                  {"seed", r.seed},
                  {"config_hash", r.config_hash},
                  {"pixel_accuracy", r.pixel_accuracy},
                  {"miou", {{"initial", optional_json(r.miou_initial)},
                            {"incremental", optional_json(r.miou_incremental)},
                            {"all", optional_json(r.miou_all)}}},
                  {"classes", classes}};
}

inline std::optional<double> optional_from_json(const io::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline MetricsReport report_from_json(const io::json& j) {
  try {
    MetricsReport r;
    r.stage = j.at("stage").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.pixel_accuracy = j.at("pixel_accuracy").get<double>();
    const auto& m = j.at("miou");
    r.miou_initial = optional_from_json(m.at("initial"));
    r.miou_incremental = optional_from_json(m.at("incremental"));
    r.miou_all = optional_from_json(m.at("all"));
    for (const auto& c : j.at("classes")) {
      r.classes.push_back({c.at("class_id").get<std::size_t>(), c.at("class_name").get<std::string>(),
                           c.at("TP").get<std::uint64_t>(), c.at("FP").get<std::uint64_t>(),
                           c.at("FN").get<std::uint64_t>(), optional_from_json(c.at("IoU"))});
    }
    return r;
  } catch (const io::json::exception& e) {
    throw DataError(std::string("metrics report: ") + e.what());
  }
}

/// Header class_id,class_name,TP,FP,FN,IoU; an undefined IoU is an empty field.
inline std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "class_id,class_name,TP,FP,FN,IoU\n";
  for (const auto& c : r.classes) {
    os << c.class_id << ',' << c.class_name << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',';
    if (c.iou) os << *c.iou;
    os << '\n';
  }
  return os.str();
}

}  // namespace satslab::metrics
