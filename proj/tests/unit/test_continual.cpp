#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>
#include <set>

#include "satslab/continual/loss.hpp"
#include "satslab/continual/presets.hpp"
#include "satslab/continual/protocol.hpp"
#include "satslab/continual/run_config.hpp"
#include "satslab/continual/trainer.hpp"
#include "satslab/data/synth.hpp"
#include "support/gradcheck.hpp"

using namespace satslab;
using namespace satslab::continual;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

ProtocolPlan plan_2_2() {
  ProtocolPlan p;
  p.m = 2;
  p.n = 2;
  p.stage_count = 3;
  p.class_order = {1, 2, 3, 4, 5, 6};
  return p;
}

ModelConfig tiny_model(std::size_t classes) {
  ModelConfig c;
  c.image_size = 8;
  c.num_blocks = 2;
  c.heads = 2;
  c.embed_dims = {4, 6};
  c.key_reduction = {1, 1};
  c.num_classes = classes;
  return c;
}

struct TinyBatch {
  std::vector<std::vector<float>> images;
  std::vector<TeacherTargets<double>> teachers;
  std::vector<LossItem<double>> items;
};

// Two 8x8 images with random labels; teacher targets from `old` when given.
TinyBatch tiny_batch(const SegModel<double>* old, std::size_t classes, const LossConfig& cfg, std::uint64_t seed) {
  TinyBatch b;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  std::uniform_int_distribution<int> lab(0, int(classes) - 1);
  for (int i = 0; i < 2; ++i) {
    std::vector<float> img(8 * 8 * 3);
    for (auto& v : img) v = u(rng);
    b.images.push_back(std::move(img));
  }
  b.teachers.reserve(2);
  for (int i = 0; i < 2; ++i) {
    LossItem<double> item;
    item.image = b.images[i];
    item.labels.resize(64);
    for (std::size_t p = 0; p < 64; ++p) item.labels[p] = p % 13 == 0 ? 255 : static_cast<std::uint8_t>(lab(rng));
    item.index = distill::build_region_index(item.labels, 8, {4, 2}, classes);
    if (old) {
      b.teachers.push_back(teacher_targets(old->forward(item.image), item.index, cfg));
      item.teacher = &b.teachers.back();
    }
    b.items.push_back(std::move(item));
  }
  return b;
}

double mean_entropy_over_valid(const SegModel<double>& m, const std::vector<LossItem<double>>& items) {
  double total = 0;
  std::size_t valid = 0;
  for (const auto& it : items) {
    const auto probs = softmax(m.forward(it.image).logits);
    const std::size_t c = probs.dim(1);
    for (std::size_t p = 0; p < it.labels.size(); ++p) {
      if (it.labels[p] == 255) continue;
      for (std::size_t k = 0; k < c; ++k) total -= probs.at(p, k) * std::log(probs.at(p, k));
      ++valid;
    }
  }
  return total / double(valid);
}

}  // namespace

// ---------------------------------------------------------------- relabeling

TEST_CASE("train relabeling keeps only the stage's classes", "[continual][relabel]") {
  const auto plan = plan_2_2();
  std::vector<std::uint8_t> labels{0, 1, 2, 3, 4, 5, 6, 255};
  CHECK(relabel_for_stage(labels, 1, plan, Split::train) == std::vector<std::uint8_t>{0, 0, 0, 3, 4, 0, 0, 255});
  CHECK(relabel_for_stage(labels, 1, plan, Split::eval) == std::vector<std::uint8_t>{0, 1, 2, 3, 4, 0, 0, 255});
  CHECK(relabel_for_stage(labels, 2, plan, Split::eval) == labels);
  std::vector<std::uint8_t> bg(16, 0);
  CHECK(relabel_for_stage(bg, 0, plan, Split::train) == bg);
  std::vector<std::uint8_t> unknown{7};
  CHECK_THROWS_AS(relabel_for_stage(unknown, 0, plan, Split::train), DataError);
  CHECK_THROWS_AS(relabel_for_stage(labels, 3, plan, Split::train), UsageError);
}

TEST_CASE("relabeling maps dataset ids to learned ids through the class order", "[continual][relabel]") {
  auto plan = plan_2_2();
  plan.class_order = {5, 3, 1, 6, 2, 4};
  std::vector<std::uint8_t> labels{5, 3, 1, 6, 2, 4};
  CHECK(relabel_for_stage(labels, 0, plan, Split::train) == std::vector<std::uint8_t>{1, 2, 0, 0, 0, 0});
  CHECK(relabel_for_stage(labels, 2, plan, Split::train) == std::vector<std::uint8_t>{0, 0, 0, 0, 5, 6});
  CHECK(relabel_for_stage(labels, 2, plan, Split::eval) == std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("protocol plans validate their schedule", "[continual][plan]") {
  auto p = plan_2_2();
  CHECK_NOTHROW(p.validate());
  CHECK(p.head_size(0) == 3);
  CHECK(p.head_size(2) == 7);
  CHECK(p.stage_range(1) == std::pair<std::size_t, std::size_t>{3, 5});
  CHECK(p.stage_lr(1, 2) == Approx(p.lr_incremental * 0.81));
  p.stage_count = 4;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = plan_2_2();
  p.class_order = {1, 2, 3, 3, 5, 6};
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

// ---------------------------------------------------------------- pseudo-labels

TEST_CASE("pseudo-labeling follows the confidence threshold", "[continual][pl]") {
  const Tensor<double> probs({3, 3}, {0.1, 0.85, 0.05, 0.1, 0.85, 0.05, 0.9, 0.05, 0.05});
  std::vector<std::uint8_t> eff{0, 4, 0};
  CHECK(pseudo_label(eff, probs, 0.7) == std::vector<std::uint8_t>{1, 4, 0});
  CHECK(pseudo_label(eff, probs, 0.9) == std::vector<std::uint8_t>{255, 4, 0});
  CHECK_THROWS_AS(pseudo_label(eff, probs, 1.0), ConfigError);
}

TEST_CASE("pseudo-labeled train maps only hold permitted ids", "[continual][pl][property]") {
  const auto plan = plan_2_2();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> lab(0, 6);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t stage = 1; stage < 3; ++stage) {
    const std::size_t old = plan.head_size(stage - 1);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::uint8_t> labels(64);
      for (auto& l : labels) l = static_cast<std::uint8_t>(lab(rng));
      std::vector<double> p(64 * old);
      for (std::size_t i = 0; i < 64; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < old; ++k) s += p[i * old + k] = std::pow(u(rng), 4);
        for (std::size_t k = 0; k < old; ++k) p[i * old + k] /= s;
      }
      const auto eff = relabel_for_stage(labels, stage, plan, Split::train);
      const auto out = pseudo_label(eff, Tensor<double>({64, old}, p), 0.7);
      const auto [first, last] = plan.stage_range(stage);
      for (std::size_t i = 0; i < 64; ++i) {
        const auto l = out[i];
        const bool current = l >= first && l < last;
        const bool old_pl = l >= 1 && l < old && eff[i] == 0;
        CHECK((l == 0 || l == 255 || current || old_pl));
        if (eff[i] != 0) CHECK(l == eff[i]);
      }
    }
  }
}

// ---------------------------------------------------------------- memory

TEST_CASE("memory quotas split capacity with the remainder to the lowest ids", "[continual][memory]") {
  CHECK(MemoryBuffer::quotas(10, 5) == std::vector<std::size_t>{0, 2, 2, 2, 2, 2});
  CHECK(MemoryBuffer::quotas(10, 3) == std::vector<std::size_t>{0, 4, 3, 3});
  CHECK(MemoryBuffer::quotas(2, 4) == std::vector<std::size_t>{0, 1, 1, 0, 0});
}

TEST_CASE("memory stays within capacity and balanced across stages", "[continual][memory][property]") {
  data::SceneSpec spec;
  spec.train_size = 60;
  spec.eval_size = 1;
  const auto ds = data::generate(spec);
  std::vector<const data::Sample*> all;
  for (const auto& s : ds.train) all.push_back(&s);
  for (std::size_t capacity : {0u, 5u, 10u, 11u}) {
    auto plan = plan_2_2();
    MemoryBuffer mem(capacity);
    std::mt19937_64 rng(capacity);
    for (std::size_t t = 0; t + 1 < plan.stage_count; ++t) {
      const auto [first, last] = plan.stage_range(t);
      std::vector<std::uint8_t> finished;
      for (auto c = first; c < last; ++c) finished.push_back(static_cast<std::uint8_t>(c));
      mem.update(all, finished, plan.learned_count(t), plan, rng);
      CHECK(mem.size() <= capacity);
      std::size_t lo = capacity, hi = 0;
      for (std::size_t c = 1; c <= plan.learned_count(t); ++c) {
        lo = std::min(lo, mem.count(static_cast<std::uint8_t>(c)));
        hi = std::max(hi, mem.count(static_cast<std::uint8_t>(c)));
      }
      if (capacity) CHECK(hi - lo <= 1);
      std::set<std::uint32_t> ids;
      for (const auto& e : mem.entries()) CHECK(ids.insert(e.sample.id).second);
    }
    if (capacity == 0) CHECK(mem.empty());
  }
}

TEST_CASE("memory records a warning when a class has no images", "[continual][memory]") {
  const auto plan = plan_2_2();
  data::Sample s;
  s.id = 1;
  s.image_size = 2;
  s.image.assign(12, 0.5f);
  s.labels = {1, 1, 0, 0};
  std::vector<const data::Sample*> stage{&s};
  MemoryBuffer mem(4);
  std::mt19937_64 rng(1);
  mem.update(stage, {1, 2}, 2, plan, rng);
  CHECK(mem.count(1) == 1);
  CHECK(mem.count(2) == 0);
  REQUIRE_FALSE(mem.warnings().empty());
  CHECK(mem.warnings().back().find("class 2") != std::string::npos);
}

// ---------------------------------------------------------------- loss config

TEST_CASE("loss and run configs round-trip and reject unknown keys", "[continual][config]") {
  LossConfig c;
  c.lambda_a = 3;
  c.pooling = Pooling::gp;
  c.distill_source = DistillSource::both;
  c.block_subset = {3};
  CHECK(to_json(loss_config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(loss_config_from_json(io::json{{"lambda_x", 1}}), ConfigError);
  CHECK_THROWS_AS(loss_config_from_json(io::json{{"pooling", "max"}}), ConfigError);
  LossConfig np;
  np.pooling = Pooling::np;
  np.distill_source = DistillSource::feature;
  CHECK_THROWS_AS(np.validate(4), ConfigError);
  LossConfig neg;
  neg.lambda_d = -1;
  CHECK_THROWS_AS(neg.validate(4), ConfigError);

  const auto rc = preset("synth-2-2");
  const auto back = run_config_from_json(to_json(rc));
  CHECK(canonical_config_text(back) == canonical_config_text(rc));
  CHECK(config_hash(back) == config_hash(rc));
  CHECK(config_hash(back).size() == 40);
  auto j = to_json(rc);
  j["model"]["num_classes"] = 3;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(rc);
  j.erase("protocol");
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  CHECK_THROWS_AS(preset("synth-9-9"), ConfigError);
}

// ---------------------------------------------------------------- combined loss

TEST_CASE("zero lambdas reduce the combined loss to plain cross-entropy", "[continual][loss]") {
  SegModel<double> old(tiny_model(3));
  SegModel<double> live = old.clone();
  live.expand_head(5, 1);
  LossConfig cfg;
  cfg.lambda_a = 0;
  cfg.lambda_d = 0;
  auto batch = tiny_batch(&old, 5, cfg, 2);
  const auto terms = combined_loss(live, batch.items, cfg);
  double ce = 0;
  std::size_t valid = 0;
  for (const auto& it : batch.items) {
    const auto out = live.forward(it.image);
    std::vector<int> t(it.labels.begin(), it.labels.end());
    std::size_t v = 0;
    for (auto l : it.labels) v += l != 255;
    ce += cross_entropy(out.logits, std::span<const int>(t)).item() * double(v);
    valid += v;
  }
  CHECK(terms.total.item() == Approx(ce / double(valid)).epsilon(1e-12));
  CHECK(terms.attention.item() == 0.0);
  CHECK(terms.kd.item() == 0.0);
}

TEST_CASE("a copy of the old model has zero transfer loss and KD equal to the old entropy", "[continual][loss]") {
  SegModel<double> old(tiny_model(4));
  const SegModel<double> live = old.clone();
  LossConfig cfg;
  auto batch = tiny_batch(&old, 4, cfg, 3);
  const auto terms = combined_loss(live, batch.items, cfg);
  CHECK(terms.attention.item() == 0.0);
  CHECK(terms.kd.item() == Approx(mean_entropy_over_valid(old, batch.items)).epsilon(1e-12));
}

TEST_CASE("combined loss equals the sum of separately evaluated terms", "[continual][loss][property]") {
  for (auto pooling : {Pooling::crp, Pooling::gp, Pooling::np}) {
    SegModel<double> old(tiny_model(3));
    auto cfg_new = tiny_model(3);
    cfg_new.init_seed = 9;
    SegModel<double> live(cfg_new);
    live.expand_head(5, 2);
    LossConfig cfg;
    cfg.pooling = pooling;
    cfg.lambda_a = 7.5;
    cfg.lambda_d = 3.25;
    auto batch = tiny_batch(&old, 5, cfg, 4);
    const double joint = combined_loss(live, batch.items, cfg).total.item();

    auto only = [&](bool a, bool d) {
      LossConfig c = cfg;
      c.use_attention_loss = a;
      c.use_output_kd = d;
      return combined_loss(live, batch.items, c);
    };
    const double ce = only(false, false).total.item();
    const double la = only(true, false).attention.item();
    const double kd = only(false, true).kd.item();
    CHECK(std::abs(joint - (ce + cfg.lambda_a * la + cfg.lambda_d * kd)) <= 1e-9);
  }
}

TEST_CASE("distillation gradients at old equals new", "[continual][loss][gradcheck]") {
  SegModel<double> old(tiny_model(4));
  SegModel<double> live = old.clone();
  auto gradients = [&](const LossConfig& c, const std::vector<LossItem<double>>& items) {
    auto params = live.parameters();
    for (auto& p : params) p.zero_grad();
    Tape<double> tape;
    Tensor<double> total;
    {
      auto scope = tape.record();
      total = combined_loss(live, items, c).total;
    }
    tape.backward(total);
    std::vector<std::vector<double>> g;
    for (const auto& p : params) g.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                            : std::vector<double>(p.numel(), 0.0));
    return g;
  };
  LossConfig cfg;
  auto batch = tiny_batch(&old, 4, cfg, 5);

  // L_a alone: its gradient vanishes at the old parameters.
  LossConfig la = cfg;
  la.use_output_kd = false;
  la.use_pseudo_labeling = false;
  LossConfig ce_only = la;
  ce_only.use_attention_loss = false;
  const auto g_la = gradients(la, batch.items);
  const auto g_ce = gradients(ce_only, batch.items);
  double max_diff = 0;
  for (std::size_t i = 0; i < g_la.size(); ++i)
    for (std::size_t k = 0; k < g_la[i].size(); ++k) max_diff = std::max(max_diff, std::abs(g_la[i][k] - g_ce[i][k]));
  CHECK(max_diff <= 1e-12);

  // L_d alone: analytic gradient matches finite differences of the soft
  // cross-entropy against the frozen old distribution.
  LossConfig kd = cfg;
  kd.use_attention_loss = false;
  kd.lambda_d = 1;
  auto params = live.parameters();
  for (auto& p : params) p.zero_grad();
  auto kd_value = [&] { return combined_loss(live, batch.items, kd).kd.item(); };
  {
    Tape<double> tape;
    Tensor<double> k;
    {
      auto scope = tape.record();
      k = combined_loss(live, batch.items, kd).kd;
    }
    tape.backward(k);
  }
  const auto r = testing::finite_difference_check(params, kd_value, 1e-6, 8, 6);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("end-to-end combined loss gradient matches finite differences", "[continual][loss][gradcheck]") {
  SegModel<double> old(tiny_model(3));
  auto cfg_new = tiny_model(3);
  cfg_new.init_seed = 4;
  SegModel<double> live(cfg_new);
  live.expand_head(5, 3);
  for (auto source : {DistillSource::attention, DistillSource::both}) {
    LossConfig cfg;
    cfg.distill_source = source;
    auto batch = tiny_batch(&old, 5, cfg, 7);
    auto params = live.parameters();
    for (auto& p : params) p.zero_grad();
    {
      Tape<double> tape;
      Tensor<double> total;
      {
        auto scope = tape.record();
        total = combined_loss(live, batch.items, cfg).total;
      }
      tape.backward(total);
    }
    const auto r = testing::finite_difference_check(
        params, [&] { return combined_loss(live, batch.items, cfg).total.item(); }, 1e-6, 8, 8);
    CHECK(r.max_rel_error < 1e-3);
  }
}

// ---------------------------------------------------------------- protocol run

TEST_CASE("a small 4-2 protocol runs end to end and is deterministic", "[continual][run]") {
  data::SceneSpec spec;
  spec.train_size = 16;
  spec.eval_size = 6;
  const auto ds = data::generate(spec);
  auto cfg = preset("synth-4-2");
  cfg.protocol.epochs_initial = 1;
  cfg.protocol.epochs_incremental = 1;
  cfg.protocol.memory_size = 4;
  const auto root = fs::temp_directory_path() / "satslab_test_continual_run";
  fs::remove_all(root);
  RunOptions opts;
  opts.out_root = root / "a";
  const auto a = run_protocol(cfg, ds, 11, opts);
  opts.out_root = root / "b";
  const auto b = run_protocol(cfg, ds, 11, opts);
  REQUIRE(a.stages.size() == 2);
  REQUIRE(a.run_dir);
  const auto name = run_dir_name(11, config_hash(cfg));
  CHECK(a.run_dir->filename() == name);
  for (const auto* f : {"stage-0/metrics.json", "stage-1/metrics.json", "stage-1/metrics.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(*a.run_dir / f));
    CHECK(io::read_text(*a.run_dir / f) == io::read_text(*b.run_dir / f));
  }
  CHECK(fs::exists(*a.run_dir / "config.json"));
  CHECK(fs::exists(*a.run_dir / "stage-1" / "model.bin"));
  CHECK(a.stages[1].report.classes.size() == 7);
  CHECK_FALSE(a.stages[0].report.miou_incremental.has_value());

  // An existing run directory is only overwritten with force.
  opts.out_root = root / "a";
  CHECK_THROWS_AS(run_protocol(cfg, ds, 11, opts), UsageError);
  fs::remove_all(root);
}
