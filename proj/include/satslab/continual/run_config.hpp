#pragma once

#include <string>

#include "satslab/continual/loss.hpp"
#include "satslab/continual/protocol.hpp"
#include "satslab/error.hpp"
#include "satslab/io/files.hpp"
#include "satslab/io/json.hpp"
#include "satslab/model/config.hpp"

namespace satslab::continual {

/// Everything a protocol run depends on besides the dataset and the seed.
/// The model's num_classes is derived from the protocol (1 + m at stage 0).
struct RunConfig {
  std::string name = "custom";
  ProtocolPlan protocol;
  LossConfig loss;
  ModelConfig model;

  void validate() const {
    protocol.validate();
    model.validate();
    loss.validate(model.num_blocks);
  }

  ModelConfig stage0_model() const {
    ModelConfig c = model;
    c.num_classes = protocol.head_size(0);
    return c;
  }
};

inline io::json protocol_to_json(const ProtocolPlan& p) {
  return io::json{{"m", p.m},
                  {"n", p.n},
                  {"stages", p.stage_count},
                  {"class_order", p.class_order},
                  {"lr_initial", p.lr_initial},
                  {"lr_incremental", p.lr_incremental},
                  {"lr_decay", p.lr_decay},
                  {"epochs_initial", p.epochs_initial},
                  {"epochs_incremental", p.epochs_incremental},
                  {"batch_size", p.batch_size},
                  {"momentum", p.momentum},
                  {"memory_size", p.memory_size},
                  {"select_best_epoch", p.select_best_epoch}};
}

inline ProtocolPlan protocol_from_json(const io::json& j, const std::string& path = "/protocol") {
  io::ObjectReader r(j, path);
  ProtocolPlan p;
  p.m = r.get<std::size_t>("m");
  p.n = r.get_or<std::size_t>("n", 0);
  p.stage_count = r.get<std::size_t>("stages");
  const auto order = r.get_uint_list("class_order");
  p.class_order.clear();
  for (auto c : order) {
    if (c == 0 || c > 254) throw ConfigError(r.where("class_order") + ": class ids must be in 1..254");
    p.class_order.push_back(static_cast<std::uint8_t>(c));
  }
  p.lr_initial = r.get_or("lr_initial", p.lr_initial);
  p.lr_incremental = r.get_or("lr_incremental", p.lr_incremental);
  p.lr_decay = r.get_or("lr_decay", p.lr_decay);
  p.epochs_initial = r.get_or("epochs_initial", p.epochs_initial);
  p.epochs_incremental = r.get_or("epochs_incremental", p.epochs_incremental);
  p.batch_size = r.get_or("batch_size", p.batch_size);
  p.momentum = r.get_or("momentum", p.momentum);
  p.memory_size = r.get_or("memory_size", p.memory_size);
  p.select_best_epoch = r.get_or("select_best_epoch", p.select_best_epoch);
  r.finish();
  return p;
}

inline io::json to_json(const RunConfig& c) {
  io::json model = to_json(c.model);
  model.erase("num_classes");
  return io::json{{"name", c.name}, {"protocol", protocol_to_json(c.protocol)}, {"loss", to_json(c.loss)}, {"model", model}};
}

inline RunConfig run_config_from_json(const io::json& j) {
  io::ObjectReader r(j, "");
  RunConfig c;
  c.name = r.get_or<std::string>("name", c.name);
  const auto* protocol = r.raw("protocol");
  if (!protocol) throw ConfigError("/protocol: missing required object");
  c.protocol = protocol_from_json(*protocol);
  if (const auto* loss = r.raw("loss")) c.loss = loss_config_from_json(*loss);
  if (const auto* model = r.raw("model")) {
    if (model->is_object() && model->contains("num_classes")) {
      throw ConfigError("/model/num_classes: derived from the protocol, must not be set");
    }
    c.model = model_config_from_json(*model);
  }
  r.finish();
  c.model.num_classes = c.protocol.head_size(0);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const io::fs::path& file) {
  return run_config_from_json(io::parse_json(io::read_text(file), file.string()));
}

/// Canonical serialization used for hashing and for the copy stored with
/// every run.
inline std::string canonical_config_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::string config_hash(const RunConfig& c) { return io::git_blob_hash(canonical_config_text(c)); }

}  // namespace satslab::continual
