#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "satslab/tensor/tensor.hpp"

namespace satslab {

template <class T>
class Tape;

namespace detail {
template <class T>
inline thread_local Tape<T>* active_tape = nullptr;
}

/// Ordered record of differentiable operations.
///
/// Operations executed while a tape is active (see record()) append an entry
/// when at least one input requires a gradient. backward() replays the
/// entries in reverse order exactly once; a second call without reset()
/// throws UsageError instead of silently doubling gradients.
///
/// A tape is bound to the thread that activates it.
template <class T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;
  using BackwardFn = std::function<void(const std::vector<T>& grad_out)>;

  struct Entry {
    const char* op;
    ImplPtr output;
    std::vector<ImplPtr> inputs;  // keeps inputs alive until the tape dies
    BackwardFn backward;
  };

  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(detail::active_tape<T>) { detail::active_tape<T> = tape; }
    ~Scope() { detail::active_tape<T> = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Activates this tape for the current thread until the scope ends.
  [[nodiscard]] Scope record() {
    if (consumed_) throw UsageError("recording onto a consumed tape; call reset() first");
    return Scope(this);
  }

  static Tape* active() { return detail::active_tape<T>; }

  void push(Entry entry) { entries_.push_back(std::move(entry)); }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool consumed() const { return consumed_; }

  const std::vector<Entry>& entries() const { return entries_; }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates gradients to every tensor
  /// that requires them. Leaf gradients accumulate across tapes until the
  /// caller zeroes them.
  void backward(const Tensor<T>& loss) {
    if (!loss.is_scalar()) {
      throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw UsageError("backward() already ran on this tape");
    if (entries_.empty()) throw UsageError("backward() on an empty tape");
    if (!loss.requires_grad()) throw UsageError("loss does not depend on any recorded operation");
    consumed_ = true;

    loss.impl()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      const auto& out = *it->output;
      if (out.grad.empty()) continue;  // no path to the loss
      it->backward(out.grad);
    }
    // Intermediates are only reachable through the tape; release them.
    for (auto& e : entries_) {
      e.output->grad.clear();
      e.output->grad.shrink_to_fit();
    }
  }

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

}  // namespace satslab
