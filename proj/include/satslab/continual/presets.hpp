#pragma once

#include <string>
#include <vector>

#include "satslab/continual/run_config.hpp"
#include "satslab/data/synth.hpp"
#include "satslab/error.hpp"

namespace satslab::continual {

/// Desk-scale protocols: synth-4-2 (6 classes, 2 stages), synth-2-2
/// (6 classes, 3 stages) and synth-4-1 (9 classes, 6 stages).
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"synth-4-2", "synth-2-2", "synth-4-1"};
  return names;
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.name = name;
  auto& p = c.protocol;
  p.lr_initial = 0.05;
  p.lr_incremental = 0.005;
  p.lr_decay = 0.9;
  p.epochs_initial = 10;
  p.epochs_incremental = 10;
  p.batch_size = 8;
  p.momentum = 0.9;
  if (name == "synth-4-2") {
    p.m = 4, p.n = 2, p.stage_count = 2;
    p.class_order = {1, 2, 3, 4, 5, 6};
  } else if (name == "synth-2-2") {
    p.m = 2, p.n = 2, p.stage_count = 3;
    p.class_order = {1, 2, 3, 4, 5, 6};
  } else if (name == "synth-4-1") {
    p.m = 4, p.n = 1, p.stage_count = 6;
    p.class_order = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  c.model.num_classes = p.head_size(0);
  c.validate();
  return c;
}

/// Scene spec matching a preset's class count.
inline data::SceneSpec preset_scene(const std::string& name, std::uint64_t seed = 0) {
  const auto c = preset(name);
  data::SceneSpec s;
  s.class_count = c.protocol.total_classes();
  s.seed = seed;
  if (s.class_count > 6) {
    s.train_size = 300;
    s.eval_size = 100;
  }
  return s;
}

}  // namespace satslab::continual
