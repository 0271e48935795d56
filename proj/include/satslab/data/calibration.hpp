#pragma once

#include <random>
#include <span>
#include <vector>

#include "satslab/data/synth.hpp"
#include "satslab/tensor/ops.hpp"
#include "satslab/tensor/optim.hpp"
#include "satslab/tensor/tape.hpp"

namespace satslab::data {

struct LinearBaselineResult {
  double train_accuracy = 0;
  double eval_accuracy = 0;
};

/// Per-pixel softmax regression on raw RGB (3 inputs plus bias), trained by
/// full-batch gradient descent with momentum from a fixed-seed initialization.
/// Accuracies are on the fitted training pixels and on the full eval split.
inline LinearBaselineResult linear_pixel_baseline(const Dataset& ds, std::uint64_t seed = 0, std::size_t iterations = 300,
                                                  double lr = 2.0) {
  const std::size_t classes = ds.spec.class_count + 1;
  auto features = [](const std::vector<Sample>& samples, std::size_t stride) {
    std::vector<double> x;
    std::vector<int> y;
    for (const auto& s : samples) {
      for (std::size_t p = 0; p < s.labels.size(); p += stride) {
        for (std::size_t c = 0; c < kChannels; ++c) x.push_back(double(s.image[p * kChannels + c]) - 0.5);
        y.push_back(s.labels[p]);
      }
    }
    return std::pair{Tensor<double>({y.size(), kChannels}, std::move(x)), std::move(y)};
  };
  // Fit on every 5th training pixel; evaluate on every eval pixel.
  auto [xtr, ytr] = features(ds.train, 5);
  auto [xev, yev] = features(ds.eval, 1);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.01);
  std::vector<double> w0(kChannels * classes);
  for (auto& v : w0) v = normal(rng);
  Tensor<double> w({kChannels, classes}, std::move(w0), true);
  Tensor<double> b = Tensor<double>::zeros({classes}, true);
  Sgd<double> opt({w, b}, 0.9);
  for (std::size_t it = 0; it < iterations; ++it) {
    Tape<double> tape;
    auto scope = tape.record();
    auto loss = cross_entropy(add_bias(matmul(xtr, w), b), std::span<const int>(ytr));
    tape.backward(loss);
    opt.step(lr);
    opt.zero_grad();
  }
  auto accuracy = [&](const Tensor<double>& x, const std::vector<int>& y) {
    const auto logits = add_bias(matmul(x, w.detach()), b.detach());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double* row = logits.data().data() + i * classes;
      hit += int(std::max_element(row, row + classes) - row) == y[i];
    }
    return double(hit) / double(y.size());
  };
  return {accuracy(xtr, ytr), accuracy(xev, yev)};
}

/// Fraction of pixels labelled background across `samples`.
inline double background_fraction(const std::vector<Sample>& samples) {
  std::size_t bg = 0, total = 0;
  for (const auto& s : samples) {
    for (auto l : s.labels) bg += l == 0;
    total += s.labels.size();
  }
  return total ? double(bg) / double(total) : 0.0;
}

}  // namespace satslab::data
