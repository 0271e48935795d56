#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "satslab/distill/losses.hpp"
#include "satslab/distill/region_index.hpp"
#include "satslab/model/seg_model.hpp"
#include "support/distill_oracles.hpp"
#include "support/gradcheck.hpp"

using namespace satslab;
using namespace satslab::distill;
using Catch::Approx;
using satslab::testing::finite_difference_check;

namespace {

BlockAttention<double> block_from_rows(std::size_t side, std::vector<std::vector<double>> rows, std::size_t heads = 1) {
  const std::size_t k = rows.at(0).size();
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  BlockAttention<double> b{side, k, {}};
  for (std::size_t h = 0; h < heads; ++h) b.heads.emplace_back(Shape{side * side, k}, flat, true);
  return b;
}

double max_abs_diff(const std::vector<double>& a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

AttentionStack<double> perturbed(const AttentionStack<double>& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  AttentionStack<double> out = s;
  for (auto& b : out)
    for (auto& a : b.heads) {
      std::vector<double> v = a.vec();
      const std::size_t k = a.dim(1);
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        double sum = 0;
        for (std::size_t q = 0; q < k; ++q) sum += v[r * k + q] *= u(rng);
        for (std::size_t q = 0; q < k; ++q) v[r * k + q] /= sum;
      }
      a = Tensor<double>(a.shape(), std::move(v), true);
    }
  return out;
}

ModelConfig tiny_config(std::size_t classes) {
  ModelConfig c;
  c.image_size = 8;
  c.num_blocks = 2;
  c.heads = 2;
  c.embed_dims = {4, 4};
  c.key_reduction = {1, 1};
  c.num_classes = classes;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- region index

TEST_CASE("all-background label map gives an empty region index", "[distill][index]") {
  std::vector<std::uint8_t> labels(64, 0);
  const auto idx = build_region_index(labels, 8, {4, 2}, 3);
  CHECK(idx.empty());
  CHECK(idx.present_classes().empty());
  REQUIRE(idx.blocks.size() == 2);
  CHECK(idx.blocks[0].grid_side == 4);
}

TEST_CASE("class filling the top half maps to the eight top cells of a 4x4 grid", "[distill][index]") {
  std::vector<std::uint8_t> labels(64, 0);
  for (std::size_t p = 0; p < 32; ++p) labels[p] = 1;
  const auto idx = build_region_index(labels, 8, {4}, 2);
  REQUIRE(idx.blocks[0].regions.count(1));
  CHECK(idx.blocks[0].regions.at(1) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(idx.blocks[0].regions.count(0) == 0);
}

TEST_CASE("pixel checkerboard index equals the centre-pixel oracle", "[distill][index]") {
  const std::size_t n = 8;
  std::vector<std::uint8_t> labels(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) labels[y * n + x] = static_cast<std::uint8_t>(1 + (x + y) % 2);
  const auto idx = build_region_index(labels, n, {4}, 3);
  std::map<std::uint8_t, std::vector<std::size_t>> oracle;
  for (std::size_t u = 0; u < 4; ++u)
    for (std::size_t v = 0; v < 4; ++v) oracle[labels[(u * 2 + 1) * n + (v * 2 + 1)]].push_back(u * 4 + v);
  CHECK(idx.blocks[0].regions == oracle);
}

TEST_CASE("majority downsampling breaks ties to the lower id and skips ignore", "[distill][index]") {
  // One 2x2 cell: two pixels of class 2, two of class 1 -> tie -> class 1.
  std::vector<std::uint8_t> tie{2, 1, 1, 2};
  auto idx = build_region_index(tie, 2, {1}, 3, LabelDownsample::majority);
  CHECK(idx.present_classes() == std::vector<std::uint8_t>{1});
  // Ignore pixels do not vote.
  std::vector<std::uint8_t> ign{255, 255, 255, 2};
  idx = build_region_index(ign, 2, {1}, 3, LabelDownsample::majority);
  CHECK(idx.present_classes() == std::vector<std::uint8_t>{2});
  // Nearest takes pixel (1,1) here.
  idx = build_region_index(tie, 2, {1}, 3, LabelDownsample::nearest);
  CHECK(idx.present_classes() == std::vector<std::uint8_t>{2});
}

TEST_CASE("out-of-range labels are data errors and ignore cells join no region", "[distill][index]") {
  std::vector<std::uint8_t> labels(16, 0);
  labels[5] = 7;
  CHECK_THROWS_AS(build_region_index(labels, 4, {2}, 3), DataError);
  labels[5] = 255;
  CHECK_NOTHROW(build_region_index(labels, 4, {2}, 3));
  std::vector<std::uint8_t> all_ignore(16, 255);
  CHECK(build_region_index(all_ignore, 4, {4, 2}, 3).empty());
}

TEST_CASE("regions are disjoint and never include background", "[distill][index][property]") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto labels = testing::random_labels(16, 5, rng);
    const auto idx = build_region_index(labels, 16, {8, 4, 2, 1}, 5);
    for (const auto& b : idx.blocks) {
      CHECK(b.regions.count(0) == 0);
      std::vector<int> owner(b.grid_side * b.grid_side, 0);
      for (const auto& [c, rows] : b.regions)
        for (auto r : rows) CHECK(++owner[r] == 1);
    }
  }
}

// ---------------------------------------------------------------- pooling

TEST_CASE("two-row region pools to the explicit average", "[distill][crp]") {
  AttentionStack<double> attn{block_from_rows(2, {{0.4, 0.3, 0.2, 0.1}, {0.2, 0.3, 0.4, 0.1}, {1, 0, 0, 0}, {0, 0, 0, 1}})};
  std::vector<std::uint8_t> labels{1, 1, 0, 0};
  const auto pooled = crp_pool(attn, build_region_index(labels, 2, {2}, 2));
  REQUIRE(pooled.size() == 1);
  const std::vector<double> expected{0.3, 0.3, 0.3, 0.1};
  CHECK(max_abs_diff(expected, pooled[0].vec.data()) <= 1e-15);
}

TEST_CASE("one-element region pools to that element's row", "[distill][crp]") {
  std::mt19937_64 rng(2);
  const auto attn = testing::random_attention(4, {1}, 2, rng);
  std::vector<std::uint8_t> labels(16, 0);
  labels[9] = 1;
  const auto pooled = crp_pool(attn, build_region_index(labels, 4, {4}, 2));
  REQUIRE(pooled.size() == 2);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto& a = attn[0].heads[h];
    for (std::size_t q = 0; q < a.dim(1); ++q) CHECK(pooled[h].vec[q] == a.at(9, q));
  }
}

TEST_CASE("uniform attention pools to 1/K", "[distill][crp]") {
  const std::size_t side = 4, k = 16;
  std::vector<std::vector<double>> rows(side * side, std::vector<double>(k, 1.0 / k));
  AttentionStack<double> attn{block_from_rows(side, rows, 2)};
  std::mt19937_64 rng(3);
  const auto labels = testing::random_labels(4, 4, rng, false);
  for (const auto& e : crp_pool(attn, build_region_index(labels, 4, {4}, 4)))
    for (double v : e.vec.data()) CHECK(v == Approx(1.0 / k).margin(1e-15));
  for (const auto& e : gp_pool(attn))
    for (double v : e.vec.data()) CHECK(v == Approx(1.0 / k).margin(1e-15));
}

TEST_CASE("crp_pool equals the loop oracle on 200 random instances", "[distill][crp][oracle]") {
  std::mt19937_64 rng(2024);
  std::size_t empties = 0, reduced = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t image = 16, grid0 = 8;
    std::vector<std::size_t> reduction{1, 1, 1};
    if (trial % 2) reduction = {2, 2, 1}, ++reduced;
    const auto attn = testing::random_attention(grid0, reduction, 2, rng);
    const auto labels = testing::random_labels(image, 6, rng);
    const auto idx = build_region_index(labels, image, {8, 4, 2}, 6);
    const auto got = crp_pool(attn, idx);
    const auto want = testing::naive_crp(attn, labels, image);
    if (want.empty()) ++empties;
    REQUIRE(got.size() == want.size());
    for (std::size_t e = 0; e < got.size(); ++e) {
      CHECK(got[e].cls == want[e].cls);
      CHECK(got[e].block == want[e].block);
      CHECK(got[e].head == want[e].head);
      CHECK(max_abs_diff(want[e].vec, got[e].vec.data()) <= 1e-12);
      double s = 0;
      for (double v : got[e].vec.data()) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-5);
    }
  }
  CHECK(empties > 0);
  CHECK(reduced == 100);
}

TEST_CASE("resolution mismatch between index and attention is an internal error", "[distill][crp]") {
  std::mt19937_64 rng(4);
  const auto attn = testing::random_attention(4, {1, 1}, 1, rng);
  std::vector<std::uint8_t> labels(64, 1);
  CHECK_THROWS_AS(crp_pool(attn, build_region_index(labels, 8, {8, 4}, 2)), InternalError);
}

// ---------------------------------------------------------------- transfer loss

TEST_CASE("transfer loss of identical stacks is exactly zero", "[distill][la]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto attn = testing::random_attention(8, {1, 2}, 2, rng);
    const auto labels = testing::random_labels(8, 4, rng);
    const auto idx = build_region_index(labels, 8, {8, 4}, 4);
    const auto pooled = crp_pool(attn, idx);
    CHECK(attention_transfer_loss<double>({pooled}, {pooled}, 2).item() == 0.0);
  }
}

TEST_CASE("hand-computed transfer loss for one class and one head", "[distill][la]") {
  PooledVectors<double> old{{1, 0, 0, Tensor<double>({4}, {0.25, 0.25, 0.25, 0.25})}};
  PooledVectors<double> fresh{{1, 0, 0, Tensor<double>({4}, {0.35, 0.15, 0.25, 0.25}, true)}};
  CHECK(attention_transfer_loss<double>({old}, {fresh}, 1).item() == Approx(0.02).margin(1e-15));
}

TEST_CASE("transfer loss matches the loop oracle and is nonnegative", "[distill][la][oracle]") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + trial % 3, batch = 1 + trial % 4;
    std::vector<PooledVectors<double>> olds, fresh;
    double oracle = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < batch; ++i) {
      const auto a_old = testing::random_attention(8, {1, 2, 1}, heads, rng);
      const auto a_new = perturbed(a_old, rng);
      const auto labels = testing::random_labels(16, 5, rng);
      const auto idx = build_region_index(labels, 16, {8, 4, 2}, 5);
      olds.push_back(crp_pool(a_old, idx));
      fresh.push_back(crp_pool(a_new, idx));
      if (auto t = testing::naive_image_term(testing::naive_crp(a_old, labels, 16), testing::naive_crp(a_new, labels, 16))) {
        oracle += *t;
        ++n;
      }
    }
    const double got = attention_transfer_loss(olds, fresh, heads).item();
    const double want = n ? oracle / double(n * heads) : 0.0;
    CHECK(got >= 0.0);
    CHECK(got == Approx(want).epsilon(1e-12).margin(1e-15));
  }
}

TEST_CASE("transfer loss is unchanged by duplicating every head", "[distill][la][property]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a_old = testing::random_attention(8, {1, 1}, 1, rng);
    const auto a_new = perturbed(a_old, rng);
    auto dup = [](AttentionStack<double> s) {
      for (auto& b : s) b.heads.push_back(b.heads[0]);
      return s;
    };
    const auto labels = testing::random_labels(8, 4, rng);
    const auto idx = build_region_index(labels, 8, {8, 4}, 4);
    const double single = attention_transfer_loss<double>({crp_pool(a_old, idx)}, {crp_pool(a_new, idx)}, 1).item();
    const double doubled =
        attention_transfer_loss<double>({crp_pool(dup(a_old), idx)}, {crp_pool(dup(a_new), idx)}, 2).item();
    CHECK(doubled == Approx(single).epsilon(1e-12).margin(1e-15));
  }
}

TEST_CASE("transfer loss is invariant to permuting rows within a region", "[distill][la][property]") {
  std::mt19937_64 rng(8);
  const std::size_t side = 4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto a_old = testing::random_attention(side, {1}, 2, rng);
    const auto a_new = perturbed(a_old, rng);
    const auto labels = testing::random_labels(side, 3, rng, false);
    const auto idx = build_region_index(labels, side, {side}, 3);
    if (idx.empty()) continue;
    // Shuffle the new model's rows among the cells of each region.
    auto shuffled = a_new;
    for (const auto& [c, rows] : idx.blocks[0].regions) {
      auto perm = rows;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t h = 0; h < shuffled[0].heads.size(); ++h) {
        auto& a = shuffled[0].heads[h];
        std::vector<double> v = a.vec();
        const std::size_t k = a.dim(1);
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t q = 0; q < k; ++q) v[rows[r] * k + q] = a_new[0].heads[h].at(perm[r], q);
        a = Tensor<double>(a.shape(), std::move(v), true);
      }
    }
    const double base = attention_transfer_loss<double>({crp_pool(a_old, idx)}, {crp_pool(a_new, idx)}, 2).item();
    const double perm = attention_transfer_loss<double>({crp_pool(a_old, idx)}, {crp_pool(shuffled, idx)}, 2).item();
    CHECK(perm == Approx(base).epsilon(1e-12).margin(1e-16));
  }
}

TEST_CASE("images without pooled classes are left out of the average", "[distill][la]") {
  PooledVectors<double> old{{1, 0, 0, Tensor<double>({2}, {0.5, 0.5})}};
  PooledVectors<double> fresh{{1, 0, 0, Tensor<double>({2}, {0.7, 0.3}, true)}};
  const double one = attention_transfer_loss<double>({old}, {fresh}, 1).item();
  const double with_empty = attention_transfer_loss<double>({old, {}}, {fresh, {}}, 1).item();
  CHECK(with_empty == one);
  CHECK(attention_transfer_loss<double>({{}, {}}, {{}, {}}, 1).item() == 0.0);
}

TEST_CASE("mismatched pooled structure is an internal error", "[distill][la]") {
  PooledVectors<double> old{{1, 0, 0, Tensor<double>({2}, {0.5, 0.5})}};
  PooledVectors<double> other{{2, 0, 0, Tensor<double>({2}, {0.5, 0.5})}};
  CHECK_THROWS_AS(attention_transfer_loss<double>({old}, {other}, 1), InternalError);
  CHECK_THROWS_AS(attention_transfer_loss<double>({old}, {{}}, 1), InternalError);
}

TEST_CASE("transfer loss sends gradient only to the new side", "[distill][la]") {
  PooledVectors<double> old{{1, 0, 0, Tensor<double>({2}, {0.5, 0.5}, true)}};
  PooledVectors<double> fresh{{1, 0, 0, Tensor<double>({2}, {0.7, 0.3}, true)}};
  Tape<double> tape;
  Tensor<double> loss;
  {
    auto scope = tape.record();
    loss = attention_transfer_loss<double>({old}, {fresh}, 1);
  }
  tape.backward(loss);
  CHECK_FALSE(old[0].vec.has_grad());
  REQUIRE(fresh[0].vec.has_grad());
  CHECK(fresh[0].vec.grad()[0] == Approx(0.4));
  CHECK(fresh[0].vec.grad()[1] == Approx(-0.4));
}

// ---------------------------------------------------------------- unbiased KD

TEST_CASE("unbiased KD folds new classes into background", "[distill][kd]") {
  const Tensor<double> old_probs({1, 2}, {0.6, 0.4});
  const Tensor<double> new_logits({1, 3}, {std::log(0.3), std::log(0.4), std::log(0.3)});
  const double oracle = -(0.6 * std::log(0.6) + 0.4 * std::log(0.4));
  CHECK(oracle == Approx(0.67301).margin(5e-6));
  CHECK(unbiased_kd_from_probs(old_probs, new_logits).item() == Approx(oracle).epsilon(1e-14));
  const Tensor<double> old_logits({1, 2}, {std::log(0.6), std::log(0.4)});
  CHECK(unbiased_kd_loss(old_logits, new_logits, 2).item() == Approx(oracle).epsilon(1e-14));
}

TEST_CASE("unbiased KD without new classes is plain soft cross-entropy", "[distill][kd][property]") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 1 + trial % 7, c = 2 + trial % 5;
    std::vector<double> a(p * c), b(p * c);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    const Tensor<double> old_logits({p, c}, a), new_logits({p, c}, b);
    double oracle = 0;
    for (std::size_t i = 0; i < p; ++i) {
      double zo = 0, zn = 0;
      for (std::size_t k = 0; k < c; ++k) zo += std::exp(a[i * c + k]), zn += std::exp(b[i * c + k]);
      for (std::size_t k = 0; k < c; ++k) oracle -= std::exp(a[i * c + k]) / zo * (b[i * c + k] - std::log(zn));
    }
    oracle /= double(p);
    CHECK(std::abs(unbiased_kd_loss(old_logits, new_logits, c).item() - oracle) <= 1e-9);
  }
}

TEST_CASE("unbiased KD of a model against itself is its entropy, the minimum", "[distill][kd][property]") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> a(12);
  for (auto& v : a) v = u(rng);
  const Tensor<double> logits({4, 3}, a);
  const auto probs = softmax(logits);
  double entropy = 0;
  for (double q : probs.data()) entropy -= q * std::log(q);
  entropy /= 4;
  const double self = unbiased_kd_loss(logits, logits, 3).item();
  CHECK(self == Approx(entropy).epsilon(1e-12));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> b(12);
    for (auto& v : b) v = u(rng);
    CHECK(unbiased_kd_loss(logits, Tensor<double>({4, 3}, b), 3).item() >= self - 1e-12);
  }
}

TEST_CASE("unbiased KD skips ignore pixels and rejects a shrinking head", "[distill][kd]") {
  const Tensor<double> old_probs({2, 2}, {0.6, 0.4, 0.1, 0.9});
  const Tensor<double> new_logits({2, 3}, {std::log(0.3), std::log(0.4), std::log(0.3), 5, -5, 0});
  std::vector<std::uint8_t> labels{0, 255};
  const double oracle = -(0.6 * std::log(0.6) + 0.4 * std::log(0.4));
  CHECK(unbiased_kd_from_probs(old_probs, new_logits, labels).item() == Approx(oracle).epsilon(1e-14));
  std::vector<std::uint8_t> none{255, 255};
  CHECK(unbiased_kd_from_probs(old_probs, new_logits, none).item() == 0.0);
  const Tensor<double> small({2, 2}, {0, 0, 0, 0});
  const Tensor<double> big({2, 3}, {0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(unbiased_kd_loss(big, small, 3), UsageError);
}

TEST_CASE("unbiased KD gradient matches finite differences", "[distill][kd][gradcheck]") {
  std::mt19937_64 rng(11);
  auto old_logits = testing::random_tensor({6, 3}, rng, -3, 3, false);
  auto new_logits = testing::random_tensor({6, 5}, rng, -3, 3, true);
  std::vector<std::uint8_t> labels{0, 1, 255, 2, 4, 0};
  auto build = [&] { return unbiased_kd_loss(old_logits, new_logits, 3, labels); };
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      auto scope = tape.record();
      loss = build();
    }
    tape.backward(loss);
  }
  const auto r = finite_difference_check({new_logits}, [&] { return build().item(); });
  CHECK(r.max_rel_error < 1e-4);
}

// ---------------------------------------------------------------- ablation variants

TEST_CASE("global pooling equals region pooling when one class covers the image", "[distill][gp]") {
  std::mt19937_64 rng(12);
  const auto attn = testing::random_attention(8, {1, 2, 1}, 2, rng);
  std::vector<std::uint8_t> labels(256, 3);
  const auto crp = crp_pool(attn, build_region_index(labels, 16, {8, 4, 2}, 4));
  const auto gp = gp_pool(attn);
  REQUIRE(crp.size() == gp.size());
  for (std::size_t e = 0; e < crp.size(); ++e) CHECK(crp[e].vec.vec() == gp[e].vec.vec());
}

TEST_CASE("no-pooling distillation is zero for identical stacks and a row mean otherwise", "[distill][np]") {
  std::mt19937_64 rng(13);
  const auto a = testing::random_attention(4, {1, 1}, 2, rng);
  CHECK(np_distill_loss<double>({a}, {a}, 2).item() == 0.0);
  const auto b = perturbed(a, rng);
  double oracle = 0;
  for (std::size_t j = 0; j < a.size(); ++j)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto& x = a[j].heads[h];
      const auto& y = b[j].heads[h];
      double s = 0;
      for (std::size_t i = 0; i < x.numel(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
      oracle += s / double(x.dim(0));
    }
  CHECK(np_distill_loss<double>({a}, {b}, 2).item() == Approx(oracle / 2).epsilon(1e-12));
}

TEST_CASE("feature distillation matches a global-average oracle on a full-cover image", "[distill][feature]") {
  std::mt19937_64 rng(14);
  const std::size_t dims = 5;
  std::vector<Tensor<double>> old_f{testing::random_tensor({16, dims}, rng, -1, 1, false),
                                    testing::random_tensor({4, dims}, rng, -1, 1, false)};
  std::vector<Tensor<double>> new_f{testing::random_tensor({16, dims}, rng, -1, 1, true),
                                    testing::random_tensor({4, dims}, rng, -1, 1, true)};
  std::vector<std::uint8_t> labels(64, 2);
  const auto idx = build_region_index(labels, 8, {4, 2}, 3);
  double oracle = 0;
  for (std::size_t j = 0; j < 2; ++j) {
    const std::size_t rows = old_f[j].dim(0);
    for (std::size_t d = 0; d < dims; ++d) {
      double mo = 0, mn = 0;
      for (std::size_t r = 0; r < rows; ++r) mo += old_f[j].at(r, d), mn += new_f[j].at(r, d);
      oracle += (mn / rows - mo / rows) * (mn / rows - mo / rows);
    }
  }
  CHECK(feature_distill_loss<double>({old_f}, {new_f}, {idx}).item() == Approx(oracle).epsilon(1e-12));
  CHECK(feature_distill_loss<double>({old_f}, {old_f}, {idx}).item() == 0.0);
  std::vector<std::uint8_t> background(64, 0);
  CHECK(feature_distill_loss<double>({old_f}, {new_f}, {build_region_index(background, 8, {4, 2}, 3)}).item() == 0.0);
  std::vector<Tensor<double>> wrong{testing::random_tensor({16, dims + 1}, rng), new_f[1]};
  CHECK_THROWS_AS(feature_distill_loss<double>({old_f}, {wrong}, {idx}), ConfigError);
}

// ---------------------------------------------------------------- end to end

TEST_CASE("transfer and KD gradients through a tiny model match finite differences", "[distill][gradcheck]") {
  auto old_cfg = tiny_config(3);
  old_cfg.init_seed = 1;
  SegModel<double> old_model(old_cfg);
  const auto frozen = snapshot(old_model);
  auto new_cfg = old_cfg;
  new_cfg.init_seed = 2;
  SegModel<double> live(new_cfg);
  live.expand_head(5, 3);

  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> img(8 * 8 * 3);
  for (auto& v : img) v = u(rng);
  const auto labels = testing::random_labels(8, 3, rng);
  const auto idx = build_region_index(labels, 8, {4, 2}, 3);
  REQUIRE_FALSE(idx.empty());
  const auto old_out = frozen.forward(std::span<const double>(img));
  const auto teacher = crp_pool(old_out.attention, idx);

  auto build = [&] {
    const auto out = live.forward(std::span<const double>(img));
    auto la = attention_transfer_loss<double>({teacher}, {crp_pool(out.attention, idx)}, 2);
    auto kd = unbiased_kd_loss(old_out.logits, out.logits, 3, labels);
    return add(scale(la, 20.0), kd);
  };
  auto params = live.parameters();
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      auto scope = tape.record();
      loss = build();
    }
    tape.backward(loss);
  }
  const auto r = finite_difference_check(params, [&] { return build().item(); }, 1e-6, 10, 4);
  INFO("checked " << r.checked);
  CHECK(r.max_rel_error < 1e-3);
}
