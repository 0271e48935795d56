#pragma once

#include <string>
#include <vector>

#include "satslab/tensor/tensor.hpp"

namespace satslab {

/// SGD with heavy-ball momentum: v ← momentum·v + g; θ ← θ − lr·v.
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, T momentum) : params_(std::move(params)), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  /// Applies one update from the gradients currently stored on the
  /// parameters. Parameters without a gradient are treated as g = 0.
  void step(T lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto& v = velocity_[i];
      auto data = p.mutable_data();
      if (p.has_grad()) {
        auto g = p.grad();
        if (g.size() != data.size()) {
          throw ConfigError("sgd: gradient length " + std::to_string(g.size()) + " does not match parameter " +
                            shape_str(p.shape()));
        }
        for (std::size_t j = 0; j < data.size(); ++j) v[j] = momentum_ * v[j] + g[j];
      } else {
        for (auto& vj : v) vj *= momentum_;
      }
      for (std::size_t j = 0; j < data.size(); ++j) data[j] -= lr * v[j];
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T momentum_;
};

}  // namespace satslab
