#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "satslab/continual/loss.hpp"
#include "satslab/continual/protocol.hpp"
#include "satslab/continual/run_config.hpp"
#include "satslab/data/synth.hpp"
#include "satslab/error.hpp"
#include "satslab/io/files.hpp"
#include "satslab/metrics/metrics.hpp"
#include "satslab/model/seg_model.hpp"
#include "satslab/tensor/optim.hpp"
#include "satslab/tensor/tape.hpp"

namespace satslab::continual {

namespace fs = std::filesystem;

/// Independent generator for one (seed, stage, purpose) triple, so that a
/// stage's randomness does not depend on how much earlier stages consumed.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stage, std::uint64_t purpose) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stage), std::uint32_t(purpose)};
  return std::mt19937_64(seq);
}

enum RngPurpose : std::uint64_t { kInitRng = 1, kShuffleRng = 2, kHeadRng = 3, kMemoryRng = 4 };

inline std::vector<std::string> learned_class_names(const ProtocolPlan& plan) {
  std::vector<std::string> names{"background"};
  for (auto d : plan.class_order) names.push_back("class" + std::to_string(d));
  return names;
}

/// Argmax over every output of `model` for each pixel of `image`.
template <class T>
std::vector<std::uint8_t> predict(const SegModel<T>& model, std::span<const float> image) {
  const auto out = model.forward(image);
  const std::size_t p = out.logits.dim(0), c = out.logits.dim(1);
  std::vector<std::uint8_t> pred(p);
  const T* x = out.logits.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    pred[i] = static_cast<std::uint8_t>(std::max_element(x + i * c, x + (i + 1) * c) - (x + i * c));
  }
  return pred;
}

/// Confusion matrix of `model` on `samples` under the stage's eval relabeling.
template <class T>
metrics::ConfusionMatrix evaluate(const SegModel<T>& model, const std::vector<data::Sample>& samples,
                                  const ProtocolPlan& plan, std::size_t stage) {
  metrics::ConfusionMatrix cm(plan.head_size(stage));
  for (const auto& s : samples) {
    const auto truth = relabel_for_stage(s.labels, stage, plan, Split::eval);
    cm.accumulate(predict(model, s.image), truth);
  }
  return cm;
}

struct StageResult {
  metrics::MetricsReport report;
  std::size_t best_epoch = 0;
  std::size_t train_images = 0;
  std::size_t memory_images = 0;
  std::vector<double> epoch_miou;
};

/// Snapshot of a finished stage handed to RunOptions::on_stage.
struct StageRecord {
  std::size_t stage;
  const ProtocolPlan& plan;
  const MemoryBuffer& memory;
  /// Effective train maps of the stage images after pseudo-labeling, in the
  /// order the stage trained on them (memory items excluded).
  const std::vector<std::vector<std::uint8_t>>& train_labels;
  const StageResult& result;
};

/// Finished stage-0 models keyed by everything stage 0 depends on; lets
/// several configurations that differ only in later stages share one
/// stage-0 training.
struct Stage0Cache {
  struct Entry {
    NamedTensors<float> parameters;
    StageResult result;
  };
  std::map<std::string, Entry> entries;
};

struct RunOptions {
  std::optional<fs::path> out_root;
  bool force = false;
  bool save_snapshots = true;
  Stage0Cache* stage0_cache = nullptr;
  /// Identifies the dataset in stage-0 cache keys.
  std::string dataset_key;
  std::function<void(const StageRecord&)> on_stage;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<fs::path> run_dir;
  std::vector<StageResult> stages;
  std::vector<std::string> warnings;
};

inline std::string run_dir_name(std::uint64_t seed, const std::string& hash) {
  return "run-" + std::to_string(seed) + "-" + hash.substr(0, 12);
}

namespace detail {

inline std::string stage0_key(const RunConfig& c, std::uint64_t seed, const std::string& dataset_key) {
  const auto& p = c.protocol;
  io::json j{{"model", to_json(c.stage0_model())},
             {"m", p.m},
             {"order", std::vector<int>(p.class_order.begin(), p.class_order.end())},
             {"lr", p.lr_initial},
             {"decay", p.lr_decay},
             {"epochs", p.epochs_initial},
             {"batch", p.batch_size},
             {"momentum", p.momentum},
             {"select", p.select_best_epoch},
             {"seed", seed},
             {"data", dataset_key}};
  return j.dump();
}

inline void write_stage_file(const fs::path& path, const std::string& text, std::size_t stage) {
  try {
    io::write_text(path, text);
  } catch (const IoError& e) {
    throw IoError("stage " + std::to_string(stage) + ": " + e.what());
  }
}

inline bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

/// Runs every stage of `config.protocol` on `dataset` with `seed`.
///
/// Per stage: snapshot the old model (t ≥ 1), grow the head, train with
/// SGD+momentum and lr = base·decay^epoch, evaluate after every epoch, keep
/// the epoch with the best all-class mIoU (when select_best_epoch), then
/// update the exemplar memory. With out_root set, writes config.json,
/// summary.json and per-stage metrics and snapshots under
/// out_root/run-<seed>-<hash12>.
inline RunResult run_protocol(const RunConfig& config, const data::Dataset& dataset, std::uint64_t seed,
                              const RunOptions& options = {}) {
  config.validate();
  const auto& plan = config.protocol;
  const auto& loss = config.loss;
  if (plan.total_classes() != dataset.spec.class_count) {
    throw ConfigError("protocol has " + std::to_string(plan.total_classes()) + " classes, dataset has " +
                      std::to_string(dataset.spec.class_count));
  }
  if (config.model.image_size != dataset.spec.image_size || config.model.channels != data::kChannels) {
    throw ConfigError("model expects " + std::to_string(config.model.image_size) + "px images with " +
                      std::to_string(config.model.channels) + " channels, dataset has " +
                      std::to_string(dataset.spec.image_size) + "px RGB");
  }
  auto log = [&](const std::string& m) {
    if (options.log) options.log(m);
  };

  RunResult result;
  result.seed = seed;
  result.config_hash = config_hash(config);
  if (options.out_root) {
    const fs::path dir = *options.out_root / run_dir_name(seed, result.config_hash);
    std::error_code ec;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!options.force) throw UsageError("run directory " + dir.string() + " already exists; pass --force to overwrite");
      fs::remove_all(dir, ec);
      if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    result.run_dir = dir;
    io::write_text(dir / "config.json", canonical_config_text(config));
  }

  ModelConfig mc = config.stage0_model();
  mc.init_seed = derived_rng(seed, config.model.init_seed, kInitRng)();
  SegModel<float> live(mc);
  MemoryBuffer memory(plan.memory_size);
  const auto names = learned_class_names(plan);
  const auto grid_sides = block_grid_sides(mc);
  bool warned_stage0 = false;

  for (std::size_t t = 0; t < plan.stage_count; ++t) {
    std::optional<FrozenModel<float>> old;
    if (t > 0) {
      old.emplace(snapshot(live));
      live.expand_head(plan.head_size(t), derived_rng(seed, t, kHeadRng)());
    }

    // Stage data: images with at least one pixel of a class introduced now.
    std::vector<const data::Sample*> stage_samples;
    std::vector<std::vector<std::uint8_t>> stage_effective;
    for (const auto& s : dataset.train) {
      auto eff = relabel_for_stage(s.labels, t, plan, Split::train);
      if (std::any_of(eff.begin(), eff.end(), [](std::uint8_t l) { return l != 0; })) {
        stage_samples.push_back(&s);
        stage_effective.push_back(std::move(eff));
      }
    }

    StageResult sr;
    sr.train_images = stage_samples.size();
    sr.memory_images = t > 0 ? memory.size() : 0;
    std::vector<std::vector<std::uint8_t>> train_labels;

    const std::string cache_key =
        options.stage0_cache && t == 0 ? detail::stage0_key(config, seed, options.dataset_key) : std::string();
    const Stage0Cache::Entry* cached = nullptr;
    if (t == 0 && options.stage0_cache) {
      const auto it = options.stage0_cache->entries.find(cache_key);
      if (it != options.stage0_cache->entries.end()) cached = &it->second;
    }

    if (cached) {
      live.load_parameters(cached->parameters);
      sr = cached->result;
      train_labels = stage_effective;
      log("stage 0: reused cached model");
    } else {
      // Build the loss items once per stage: labels, region index and the old
      // model's targets are fixed while the old model is frozen.
      std::vector<TeacherTargets<float>> teachers;
      std::vector<LossItem<float>> items;
      const std::size_t total_items = stage_samples.size() + (t > 0 ? memory.size() : 0);
      teachers.reserve(total_items);
      items.reserve(total_items);
      auto add_item = [&](const data::Sample& s, std::vector<std::uint8_t> eff, bool from_memory) {
        LossItem<float> item;
        item.image = s.image;
        if (!old) {
          item.labels = std::move(eff);
          item.index = distill::build_region_index(item.labels, mc.image_size, grid_sides, plan.head_size(t), loss.downsample);
        } else {
          const auto old_out = old->forward(std::span<const float>(s.image));
          const auto probs = softmax(old_out.logits);
          item.labels = (loss.use_pseudo_labeling && !from_memory) ? pseudo_label(eff, probs, loss.tau) : eff;
          const auto& region_labels = loss.pseudo_labels_in_regions ? item.labels : eff;
          item.index = distill::build_region_index(region_labels, mc.image_size, grid_sides, plan.head_size(t), loss.downsample);
          teachers.push_back(teacher_targets(old_out, item.index, loss));
          item.teacher = &teachers.back();
        }
        if (!from_memory) train_labels.push_back(item.labels);
        items.push_back(std::move(item));
      };
      for (std::size_t i = 0; i < stage_samples.size(); ++i) add_item(*stage_samples[i], stage_effective[i], false);
      if (t > 0) {
        for (const auto& e : memory.entries()) {
          add_item(e.sample, relabel_for_stage(e.sample.labels, t, plan, Split::eval), true);
        }
      }
      if (t == 0 && (loss.wants_attention() || loss.wants_kd()) && !warned_stage0) {
        log("stage 0: distillation terms are zero without an old model");
        warned_stage0 = true;
      }

      Sgd<float> sgd(live.parameters(), static_cast<float>(plan.momentum));
      auto shuffle_rng = derived_rng(seed, t, kShuffleRng);
      std::vector<std::size_t> order(items.size());
      std::iota(order.begin(), order.end(), 0);
      std::optional<NamedTensors<float>> best_params;
      double best_miou = -1;
      const std::size_t epochs = plan.stage_epochs(t);
      for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const float lr = static_cast<float>(plan.stage_lr(t, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += plan.batch_size) {
          std::vector<LossItem<float>> batch;
          for (std::size_t k = b0; k < std::min(order.size(), b0 + plan.batch_size); ++k) batch.push_back(items[order[k]]);
          Tape<float> tape;
          auto scope = tape.record();
          const auto terms = combined_loss(live, batch, loss);
          const float total = terms.total.item();
          if (!std::isfinite(total)) {
            io::json diag{{"stage", t},
                          {"epoch", epoch},
                          {"batch_start", b0},
                          {"lr", lr},
                          {"loss", {{"total", total}, {"ce", terms.ce.item()}, {"attention", terms.attention.item()}, {"kd", terms.kd.item()}}},
                          {"parameters_finite", true}};
            std::vector<std::uint32_t> ids;
            for (std::size_t k = b0; k < std::min(order.size(), b0 + plan.batch_size); ++k) {
              ids.push_back(order[k] < stage_samples.size() ? stage_samples[order[k]]->id : 0xffffffffu);
            }
            diag["sample_ids"] = ids;
            for (const auto& [name, p] : live.named_parameters()) {
              if (!detail::all_finite(p.data())) {
                diag["parameters_finite"] = false;
                diag["first_nonfinite_parameter"] = name;
                break;
              }
            }
            std::string where = "";
            if (result.run_dir) {
              const auto path = *result.run_dir / ("diagnostics-stage" + std::to_string(t) + ".json");
              io::write_text(path, diag.dump(2) + "\n");
              where = "; diagnostics written to " + path.string();
            }
            throw NumericalError("stage " + std::to_string(t) + " epoch " + std::to_string(epoch) +
                                 ": non-finite loss " + std::to_string(total) + where);
          }
          if (terms.total.requires_grad()) {
            tape.backward(terms.total);
            sgd.step(lr);
            sgd.zero_grad();
          }
          epoch_loss += total;
          ++batches;
        }
        const auto cm = evaluate(live, dataset.eval, plan, t);
        auto report = metrics::make_report(cm, plan.head_size(0), t, names);
        const double miou = report.miou_all.value_or(0.0);
        sr.epoch_miou.push_back(miou);
        log("stage " + std::to_string(t) + " epoch " + std::to_string(epoch) + " loss " +
            std::to_string(batches ? epoch_loss / double(batches) : 0.0) + " mIoU " + std::to_string(miou) +
            " pixel acc " + std::to_string(report.pixel_accuracy));
        const bool last = epoch + 1 == epochs;
        if ((plan.select_best_epoch && miou > best_miou) || (!plan.select_best_epoch && last)) {
          best_miou = miou;
          sr.best_epoch = epoch;
          sr.report = std::move(report);
          if (plan.select_best_epoch && !last) {
            best_params.emplace();
            for (const auto& [name, tensor] : live.named_parameters()) best_params->emplace_back(name, tensor.clone());
          }
          if (last) best_params.reset();
        }
      }
      if (best_params) live.load_parameters(*best_params);
      if (t == 0 && options.stage0_cache) {
        NamedTensors<float> copy;
        for (const auto& [name, tensor] : live.named_parameters()) copy.emplace_back(name, tensor.clone());
        options.stage0_cache->entries[cache_key] = {std::move(copy), sr};
      }
    }
    sr.report.seed = seed;
    sr.report.config_hash = result.config_hash;

    if (plan.memory_size > 0 && t + 1 < plan.stage_count) {
      const auto [first, last] = plan.stage_range(t);
      std::vector<std::uint8_t> finished;
      for (auto c = first; c < last; ++c) finished.push_back(static_cast<std::uint8_t>(c));
      auto mem_rng = derived_rng(seed, t, kMemoryRng);
      memory.update(stage_samples, finished, plan.learned_count(t), plan, mem_rng);
    }

    if (result.run_dir) {
      const fs::path sdir = *result.run_dir / ("stage-" + std::to_string(t));
      std::error_code ec;
      fs::create_directories(sdir, ec);
      if (ec) throw IoError("stage " + std::to_string(t) + ": cannot create " + sdir.string());
      detail::write_stage_file(sdir / "metrics.json", metrics::to_json(sr.report).dump(2) + "\n", t);
      detail::write_stage_file(sdir / "metrics.csv", metrics::to_csv(sr.report), t);
      if (options.save_snapshots) {
        try {
          live.save(sdir / "model");
        } catch (const IoError& e) {
          throw IoError("stage " + std::to_string(t) + ": " + e.what());
        }
      }
    }
    if (options.on_stage) options.on_stage(StageRecord{t, plan, memory, train_labels, sr});
    log("stage " + std::to_string(t) + " done: best epoch " + std::to_string(sr.best_epoch) + " mIoU all " +
        std::to_string(sr.report.miou_all.value_or(0.0)));
    result.stages.push_back(std::move(sr));
  }
  result.warnings = memory.warnings();

  if (result.run_dir) {
    io::json stages = io::json::array();
    for (const auto& s : result.stages) {
      stages.push_back({{"stage", s.report.stage},
                        {"best_epoch", s.best_epoch},
                        {"train_images", s.train_images},
                        {"memory_images", s.memory_images},
                        {"pixel_accuracy", s.report.pixel_accuracy},
                        {"miou", {{"initial", metrics::optional_json(s.report.miou_initial)},
                                  {"incremental", metrics::optional_json(s.report.miou_incremental)},
                                  {"all", metrics::optional_json(s.report.miou_all)}}}});
    }
    io::json summary{{"name", config.name},        {"seed", seed},         {"config_hash", result.config_hash},
                     {"config", to_json(config)},  {"stages", stages},     {"warnings", result.warnings}};
    io::write_text(*result.run_dir / "summary.json", summary.dump(2) + "\n");
  }
  return result;
}

/// The same configuration collapsed into one stage that learns every class.
inline RunConfig joint_config(RunConfig c) {
  c.name += "-joint";
  c.protocol.m = c.protocol.total_classes();
  c.protocol.n = 0;
  c.protocol.stage_count = 1;
  c.protocol.memory_size = 0;
  c.model.num_classes = c.protocol.head_size(0);
  return c;
}

}  // namespace satslab::continual
