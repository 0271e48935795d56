#pragma once

// Command implementations behind the satslab executable. Each command takes
// parsed options, writes its artifacts and returns; errors propagate as
// satslab exceptions and map to exit codes in main.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "satslab/continual/presets.hpp"
#include "satslab/continual/run_config.hpp"
#include "satslab/continual/trainer.hpp"
#include "satslab/data/dataset_io.hpp"
#include "satslab/data/synth.hpp"
#include "satslab/error.hpp"
#include "satslab/io/files.hpp"
#include "satslab/io/json.hpp"

namespace satslab::cli {

namespace fs = std::filesystem;
using continual::RunConfig;

/// Thread-safe line logger; a null stream silences it.
class Logger {
 public:
  explicit Logger(std::ostream* out = &std::cerr) : out_(out) {}
  void operator()(const std::string& line) {
    if (!out_) return;
    std::lock_guard lock(mu_);
    *out_ << line << '\n' << std::flush;
  }

 private:
  std::ostream* out_;
  std::mutex mu_;
};

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Parses "1,2,3" into seeds; rejects empty lists, blanks and duplicates.
inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--seeds: '" + item + "' is not a nonnegative integer");
    }
    const auto s = std::stoull(item);
    for (auto prev : seeds)
      if (prev == s) throw UsageError("--seeds: seed " + item + " listed twice");
    seeds.push_back(s);
  }
  if (seeds.empty()) throw UsageError("--seeds: no seeds given");
  return seeds;
}

/// Parallel seed runs: SATSLAB_THREADS caps the worker count, which defaults
/// to the hardware concurrency.
inline std::size_t seed_workers(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SATSLAB_THREADS")) {
    const std::string v = env;
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || std::stoul(v) == 0) {
      throw ConfigError("SATSLAB_THREADS must be a positive integer, got '" + v + "'");
    }
    n = std::min<std::size_t>(n, std::stoul(v));
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Calls f(i) for i in [0, jobs) on up to `workers` threads. Rethrows the
/// error of the lowest failing index after every job has stopped.
template <class F>
void parallel_for(std::size_t jobs, std::size_t workers, F&& f) {
  std::vector<std::exception_ptr> errors(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < jobs;) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- generate

struct GenerateOptions {
  std::optional<fs::path> spec_file;
  std::optional<std::string> preset;  // scene matching a preset's class count
  std::optional<std::uint64_t> seed;
  fs::path out;
  bool force = false;
};

inline data::SceneSpec resolve_scene(const GenerateOptions& o) {
  if (o.spec_file && o.preset) throw UsageError("generate: pass either --spec or --preset, not both");
  data::SceneSpec spec;
  if (o.spec_file) spec = data::scene_spec_from_json(io::parse_json(io::read_text(*o.spec_file), o.spec_file->string()));
  if (o.preset) spec = continual::preset_scene(*o.preset);
  if (o.seed) spec.seed = *o.seed;
  spec.validate();
  return spec;
}

inline data::Dataset cmd_generate(const GenerateOptions& o, Logger& log) {
  const auto spec = resolve_scene(o);
  std::error_code ec;
  if (fs::exists(o.out, ec) && !fs::is_empty(o.out, ec)) {
    if (!o.force) throw UsageError("output directory " + o.out.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(o.out, ec);
    if (ec) throw IoError("cannot clear " + o.out.string() + ": " + ec.message());
  }
  auto ds = data::generate(spec);
  data::save_dataset(ds, o.out);
  log("generated " + std::to_string(ds.train.size()) + " train and " + std::to_string(ds.eval.size()) +
      " eval samples with " + std::to_string(spec.class_count) + " classes in " + o.out.string());
  if (ds.dropped_shapes) log("note: " + std::to_string(ds.dropped_shapes) + " shapes did not fit and were dropped");
  return ds;
}

// ---------------------------------------------------------------- run

struct RunOptions {
  std::optional<fs::path> config_file;
  std::optional<std::string> preset;
  std::optional<fs::path> data;  // generated in memory from the matching scene when absent
  std::vector<std::uint64_t> seeds{1};
  fs::path out;
  bool force = false;
  bool save_snapshots = true;
};

inline RunConfig resolve_config(const std::optional<fs::path>& file, const std::optional<std::string>& preset) {
  if (file.has_value() == preset.has_value()) throw UsageError("pass exactly one of --config and --preset");
  if (preset) return continual::preset(*preset);
  return continual::load_run_config(*file);
}

struct LoadedData {
  data::Dataset dataset;
  std::string key;
};

inline LoadedData resolve_data(const std::optional<fs::path>& dir, const RunConfig& config, Logger& log) {
  LoadedData d;
  if (dir) {
    if (!fs::is_directory(*dir)) throw IoError("dataset directory " + dir->string() + " does not exist");
    d.dataset = data::load_dataset(*dir);
  } else {
    data::SceneSpec spec;
    spec.class_count = config.protocol.total_classes();
    spec.image_size = config.model.image_size;
    if (spec.class_count > 6) {
      spec.train_size = 300;
      spec.eval_size = 100;
    }
    log("no --data given; generating the default scene with " + std::to_string(spec.class_count) + " classes");
    d.dataset = data::generate(spec);
  }
  d.key = data::to_json(d.dataset.spec).dump();
  return d;
}

/// Refuses up front when any (config, seed) run directory already exists.
inline void check_fresh(const RunConfig& config, const std::vector<std::uint64_t>& seeds, const fs::path& root,
                        bool force) {
  if (force) return;
  const auto hash = continual::config_hash(config);
  for (auto s : seeds) {
    const auto dir = root / continual::run_dir_name(s, hash);
    if (fs::exists(dir)) {
      throw UsageError("run directory " + dir.string() + " already exists; pass --force to overwrite");
    }
  }
}

/// Runs `config` once per seed under `root`; results in seed order.
inline std::vector<continual::RunResult> run_seeds(const RunConfig& config, const LoadedData& data,
                                                   const std::vector<std::uint64_t>& seeds, const fs::path& root,
                                                   bool force, bool save_snapshots, Logger& log) {
  std::vector<continual::RunResult> results(seeds.size());
  parallel_for(seeds.size(), seed_workers(seeds.size()), [&](std::size_t i) {
    continual::RunOptions o;
    o.out_root = root;
    o.force = force;
    o.save_snapshots = save_snapshots;
    o.dataset_key = data.key;
    const std::string tag = "[" + config.name + " seed " + std::to_string(seeds[i]) + "] ";
    o.log = [&log, tag](const std::string& m) { log(tag + m); };
    results[i] = continual::run_protocol(config, data.dataset, seeds[i], o);
  });
  return results;
}

inline void write_run_manifest(const RunConfig& config, const std::vector<std::uint64_t>& seeds, const fs::path& out,
                               const std::vector<continual::RunResult>& results) {
  const auto hash = continual::config_hash(config);
  io::json runs = io::json::array();
  for (const auto& r : results) runs.push_back({{"seed", r.seed}, {"dir", r.run_dir->filename().string()}});
  io::json j{{"config", to_json(config)}, {"config_hash", hash}, {"seeds", seeds}, {"out", out.string()}, {"runs", runs}};
  io::write_text(out / ("manifest-" + hash.substr(0, 12) + ".json"), j.dump(2) + "\n");
}

inline std::vector<continual::RunResult> cmd_run(const RunOptions& o, Logger& log) {
  const auto config = resolve_config(o.config_file, o.preset);
  const auto data = resolve_data(o.data, config, log);
  check_fresh(config, o.seeds, o.out, o.force);
  auto results = run_seeds(config, data, o.seeds, o.out, o.force, o.save_snapshots, log);
  write_run_manifest(config, o.seeds, o.out, results);
  for (const auto& r : results) {
    const auto& last = r.stages.back().report;
    log("seed " + std::to_string(r.seed) + ": final mIoU all " + fixed(last.miou_all.value_or(0), 4) + " initial " +
        fixed(last.miou_initial.value_or(0), 4) + " -> " + r.run_dir->string());
  }
  return results;
}

// ---------------------------------------------------------------- ablate

/// One labelled variant of a base configuration.
struct Variant {
  std::string label;
  RunConfig config;
};

inline std::vector<std::string> ablation_axes() { return {"components", "blocks", "pooling", "distill-source", "baselines"}; }

/// Expands `base` along one axis. Variant configs are named
/// "<base name>/<label>" so plot-data groups their runs.
inline std::vector<Variant> ablation_grid(const RunConfig& base, const std::string& axis) {
  std::vector<Variant> out;
  auto add = [&](const std::string& label, auto&& edit) {
    RunConfig c = base;
    edit(c);
    c.name = base.name + "/" + label;
    c.validate();
    out.push_back({label, std::move(c)});
  };
  if (axis == "components") {
    add("full", [](RunConfig& c) {
      c.loss.use_pseudo_labeling = c.loss.use_attention_loss = c.loss.use_output_kd = true;
    });
    add("no-PL", [](RunConfig& c) { c.loss.use_pseudo_labeling = false; });
    add("no-La", [](RunConfig& c) { c.loss.use_attention_loss = false; });
    add("no-Ld", [](RunConfig& c) { c.loss.use_output_kd = false; });
  } else if (axis == "blocks") {
    const std::size_t b = base.model.num_blocks;
    for (std::size_t k = 1; k < b; ++k) {
      add("last-" + std::to_string(k), [&](RunConfig& c) {
        c.loss.block_subset.clear();
        for (std::size_t j = b - k; j < b; ++j) c.loss.block_subset.push_back(j);
      });
    }
    add("all", [](RunConfig& c) { c.loss.block_subset.clear(); });
  } else if (axis == "pooling") {
    add("GP", [](RunConfig& c) { c.loss.pooling = continual::Pooling::gp; });
    add("NP", [](RunConfig& c) {
      c.loss.pooling = continual::Pooling::np;
      c.loss.distill_source = continual::DistillSource::attention;
    });
    add("CRP", [](RunConfig& c) { c.loss.pooling = continual::Pooling::crp; });
  } else if (axis == "distill-source") {
    add("attention", [](RunConfig& c) { c.loss.distill_source = continual::DistillSource::attention; });
    add("feature", [](RunConfig& c) { c.loss.distill_source = continual::DistillSource::feature; });
    add("both", [](RunConfig& c) { c.loss.distill_source = continual::DistillSource::both; });
  } else if (axis == "baselines") {
    add("fine-tune", [](RunConfig& c) {
      c.loss.lambda_a = c.loss.lambda_d = 0;
      c.loss.use_pseudo_labeling = false;
    });
    add("full", [](RunConfig&) {});
    RunConfig joint = continual::joint_config(base);
    joint.name = base.name + "/joint";
    out.push_back({"joint", std::move(joint)});
  } else {
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw UsageError("unknown ablation axis '" + axis + "' (known: " + known + ")");
  }
  return out;
}

struct AblateOptions {
  std::optional<fs::path> config_file;
  std::optional<std::string> preset;
  std::optional<fs::path> data;
  std::string axis;
  std::vector<std::uint64_t> seeds{1};
  fs::path out;
  bool force = false;
  bool save_snapshots = false;
};

struct AblationRow {
  std::string label;
  std::uint64_t seed;
  continual::RunResult result;
};

/// Comparison table: one row per (variant, seed) plus a mean row per variant,
/// with the final stage's group mIoUs.
inline std::string ablation_csv(const std::vector<Variant>& grid, const std::vector<AblationRow>& rows) {
  auto cell = [](const std::optional<double>& v) { return v ? fixed(*v) : std::string(); };
  std::string csv = "variant,seed,miou_initial,miou_incremental,miou_all\n";
  for (const auto& v : grid) {
    std::map<int, std::pair<double, std::size_t>> sums;  // 0 initial, 1 incremental, 2 all
    for (const auto& r : rows) {
      if (r.label != v.label) continue;
      const auto& rep = r.result.stages.back().report;
      csv += r.label + "," + std::to_string(r.seed) + "," + cell(rep.miou_initial) + "," + cell(rep.miou_incremental) +
             "," + cell(rep.miou_all) + "\n";
      const std::optional<double> groups[3] = {rep.miou_initial, rep.miou_incremental, rep.miou_all};
      for (int g = 0; g < 3; ++g)
        if (groups[g]) sums[g].first += *groups[g], ++sums[g].second;
    }
    auto mean = [&](int g) {
      return sums.count(g) ? std::optional<double>(sums[g].first / double(sums[g].second)) : std::nullopt;
    };
    csv += v.label + ",mean," + cell(mean(0)) + "," + cell(mean(1)) + "," + cell(mean(2)) + "\n";
  }
  return csv;
}

inline std::vector<AblationRow> cmd_ablate(const AblateOptions& o, Logger& log) {
  const auto base = resolve_config(o.config_file, o.preset);
  const auto grid = ablation_grid(base, o.axis);
  const auto data = resolve_data(o.data, base, log);
  const fs::path root = o.out / o.axis;
  for (const auto& v : grid) check_fresh(v.config, o.seeds, root / v.label, o.force);

  // Seeds run in parallel; within a seed the variants share one stage-0 model
  // whenever their stage 0 is identical.
  std::vector<std::vector<AblationRow>> per_seed(o.seeds.size());
  parallel_for(o.seeds.size(), seed_workers(o.seeds.size()), [&](std::size_t i) {
    continual::Stage0Cache cache;
    for (const auto& v : grid) {
      continual::RunOptions ro;
      ro.out_root = root / v.label;
      ro.force = o.force;
      ro.save_snapshots = o.save_snapshots;
      ro.stage0_cache = &cache;
      ro.dataset_key = data.key;
      const std::string tag = "[" + v.label + " seed " + std::to_string(o.seeds[i]) + "] ";
      ro.log = [&log, tag](const std::string& m) { log(tag + m); };
      per_seed[i].push_back({v.label, o.seeds[i], continual::run_protocol(v.config, data.dataset, o.seeds[i], ro)});
    }
  });
  std::vector<AblationRow> rows;
  for (auto& s : per_seed)
    for (auto& r : s) rows.push_back(std::move(r));
  const auto csv = ablation_csv(grid, rows);
  io::write_text(root / "ablation.csv", csv);
  std::cout << csv;
  log("wrote " + (root / "ablation.csv").string());
  return rows;
}

// ---------------------------------------------------------------- plot-data

struct SeriesRow {
  std::string method;
  std::size_t stage;
  double mean;
  double stddev;  // population standard deviation across runs
};

/// Run directories under each path: the path itself when it holds a
/// summary.json, otherwise every descendant that does.
inline std::vector<fs::path> find_runs(const std::vector<fs::path>& paths) {
  std::vector<fs::path> runs;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw IoError("run path " + p.string() + " does not exist");
    if (fs::exists(p / "summary.json")) {
      runs.push_back(p);
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file() && e.path().filename() == "summary.json") found.push_back(e.path().parent_path());
    std::sort(found.begin(), found.end());
    if (found.empty()) throw DataError("no run summaries under " + p.string());
    runs.insert(runs.end(), found.begin(), found.end());
  }
  return runs;
}

/// Per-stage all-class mIoU series grouped by config name.
inline std::vector<SeriesRow> plot_series(const std::vector<fs::path>& run_paths) {
  if (run_paths.empty()) throw UsageError("plot-data: no runs given");
  const auto runs = find_runs(run_paths);
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::vector<double>>> curves;  // method -> runs -> per-stage mIoU
  std::map<std::string, fs::path> first_run;
  for (const auto& dir : runs) {
    const auto j = io::parse_json(io::read_text(dir / "summary.json"), (dir / "summary.json").string());
    std::string method;
    std::vector<double> curve;
    try {
      method = j.at("name").get<std::string>();
      for (const auto& s : j.at("stages")) {
        const auto& all = s.at("miou").at("all");
        if (all.is_null()) throw DataError("stage without an all-class mIoU");
        curve.push_back(all.get<double>());
      }
    } catch (const io::json::exception& e) {
      throw DataError((dir / "summary.json").string() + ": " + e.what());
    }
    if (!curves.count(method)) {
      order.push_back(method);
      first_run[method] = dir;
    } else if (curves[method].front().size() != curve.size()) {
      throw DataError("plot-data: method '" + method + "' has " + std::to_string(curves[method].front().size()) +
                      " stages in " + first_run[method].string() + " but " + std::to_string(curve.size()) + " in " +
                      dir.string());
    }
    curves[method].push_back(std::move(curve));
  }
  std::vector<SeriesRow> rows;
  for (const auto& m : order) {
    const auto& c = curves[m];
    for (std::size_t t = 0; t < c.front().size(); ++t) {
      double mean = 0;
      for (const auto& r : c) mean += r[t];
      mean /= double(c.size());
      double var = 0;
      for (const auto& r : c) var += (r[t] - mean) * (r[t] - mean);
      rows.push_back({m, t, mean, std::sqrt(var / double(c.size()))});
    }
  }
  return rows;
}

inline std::string series_csv(const std::vector<SeriesRow>& rows) {
  std::string csv = "method,stage,mean,stddev\n";
  for (const auto& r : rows) csv += r.method + "," + std::to_string(r.stage) + "," + fixed(r.mean) + "," + fixed(r.stddev) + "\n";
  return csv;
}

// ---------------------------------------------------------------- presets

inline std::string cmd_presets(const std::optional<std::string>& name) {
  if (name) return continual::canonical_config_text(continual::preset(*name));
  std::string out;
  for (const auto& n : continual::preset_names()) {
    const auto c = continual::preset(n);
    const auto& p = c.protocol;
    out += n + "  m=" + std::to_string(p.m) + " n=" + std::to_string(p.n) + " stages=" + std::to_string(p.stage_count) +
           " classes=" + std::to_string(p.total_classes()) + "\n";
  }
  return out;
}

}  // namespace satslab::cli
