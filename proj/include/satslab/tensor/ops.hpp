#pragma once

// Differentiable operations over Tensor<T>. No implicit broadcasting: every
// op states the shapes it accepts and throws ConfigError (naming both shapes)
// on mismatch.

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "satslab/tensor/tape.hpp"
#include "satslab/tensor/tensor.hpp"

namespace satslab {

inline constexpr int kIgnoreIndex = 255;

namespace detail {

template <class T>
void shape_mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}

template <class T>
void require_rank2(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2) throw ConfigError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T>
Tensor<T> attach(Tensor<T> out, const char* op, std::vector<typename Tape<T>::ImplPtr> inputs,
                 typename Tape<T>::BackwardFn backward) {
  out.set_requires_grad(true);
  Tape<T>::active()->push({op, out.impl(), std::move(inputs), std::move(backward)});
  return out;
}

template <class T>
std::vector<T>* grad_of(const typename Tape<T>::ImplPtr& impl) {
  return impl->requires_grad ? &impl->grad_buffer() : nullptr;
}

}  // namespace detail

/// C = A·B for A (m,k) and B (k,n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.dim(1) != b.dim(0)) detail::shape_mismatch("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  Tensor<T> out({m, n}, std::move(c));
  if (!detail::should_record<T>({&a, &b})) return out;
  auto ia = a.impl(), ib = b.impl();
  return detail::attach<T>(out, "matmul", {ia, ib}, [ia, ib, m, k, n](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of<T>(ia)) {
      const T* pb = ib->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = pb + p * n;
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          (*ga)[i * k + p] += acc;
        }
      }
    }
    if (auto* gb = detail::grad_of<T>(ib)) {
      const T* pa = ia->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = pa[i * k + p];
          T* gbrow = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

namespace detail {

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_elementwise(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  if (a.shape() != b.shape()) shape_mismatch(op, a, b);
  const std::size_t n = a.numel();
  std::vector<T> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = fwd(a[i], b[i]);
  Tensor<T> out(a.shape(), std::move(c));
  if (!should_record<T>({&a, &b})) return out;
  auto ia = a.impl(), ib = b.impl();
  return attach<T>(out, op, {ia, ib}, [ia, ib, n, da, db](const std::vector<T>& g) {
    if (auto* ga = grad_of<T>(ia)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g[i] * da(ia->data[i], ib->data[i]);
    }
    if (auto* gb = grad_of<T>(ib)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i] += g[i] * db(ia->data[i], ib->data[i]);
    }
  });
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary_elementwise(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  std::vector<T> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = fwd(a[i]);
  Tensor<T> out(a.shape(), std::move(c));
  if (!should_record<T>({&a})) return out;
  auto ia = a.impl();
  auto io = out.impl();
  return attach<T>(out, op, {ia}, [ia, io, n, deriv](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(ia->data[i], io->data[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_elementwise<T>(
      "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_elementwise<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_elementwise<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary_elementwise<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

/// Adds a length-n bias to every row of an (m,n) matrix.
template <class T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require_rank2("add_bias", a);
  if (bias.rank() != 1 || bias.dim(0) != a.dim(1)) detail::shape_mismatch("add_bias", a, bias);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> c(a.vec());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += bias[j];
  Tensor<T> out(a.shape(), std::move(c));
  if (!detail::should_record<T>({&a, &bias})) return out;
  auto ia = a.impl(), ib = bias.impl();
  return detail::attach<T>(out, "add_bias", {ia, ib}, [ia, ib, m, n](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of<T>(ia)) {
      for (std::size_t i = 0; i < m * n; ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = detail::grad_of<T>(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
    }
  });
}

/// Sum of all entries, as a scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  return detail::attach<T>(out, "sum", {ia}, [ia](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (auto& v : ga) v += g[0];
  });
}

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() == 0) throw ConfigError("softmax: needs at least one axis");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<T> y(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * n;
    T* out = y.data() + r * n;
    T mx = *std::max_element(x, x + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += out[j] = std::exp(x[j] - mx);
    for (std::size_t j = 0; j < n; ++j) out[j] /= z;
  }
  Tensor<T> out(a.shape(), std::move(y));
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  auto io = out.impl();
  return detail::attach<T>(out, "softmax", {ia}, [ia, io, rows, n](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = io->data.data() + r * n;
      const T* gr = g.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Layer normalization over the last axis with affine gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (a.rank() == 0) throw ConfigError("layer_norm: needs at least one axis");
  const std::size_t n = a.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != n) detail::shape_mismatch("layer_norm", a, gain);
  if (bias.rank() != 1 || bias.dim(0) != n) detail::shape_mismatch("layer_norm", a, bias);
  const std::size_t rows = a.numel() / n;
  std::vector<T> y(a.numel()), xhat(a.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (x[j] - mean) * inv_std[r];
      y[r * n + j] = xhat[r * n + j] * gain[j] + bias[j];
    }
  }
  Tensor<T> out(a.shape(), std::move(y));
  if (!detail::should_record<T>({&a, &gain, &bias})) return out;
  auto ia = a.impl(), ig = gain.impl(), ib = bias.impl();
  return detail::attach<T>(
      out, "layer_norm", {ia, ig, ib},
      [ia, ig, ib, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const std::vector<T>& g) {
        auto* ga = detail::grad_of<T>(ia);
        auto* gg = detail::grad_of<T>(ig);
        auto* gb = detail::grad_of<T>(ib);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * n;
          const T* xr = xhat.data() + r * n;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) (*gg)[j] += gr[j] * xr[j];
            if (gb) (*gb)[j] += gr[j];
            dxhat[j] = gr[j] * ig->data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xr[j];
          }
          if (!ga) continue;
          mean_d /= T(n);
          mean_dx /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            (*ga)[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
          }
        }
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.vec());
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  return detail::attach<T>(out, "reshape", {ia}, [ia](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2("transpose", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = a[i * n + j];
  Tensor<T> out({n, m}, std::move(y));
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  return detail::attach<T>(out, "transpose", {ia}, [ia, m, n](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

/// Concatenates matrices with equal row counts along the column axis.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p);
    if (p.dim(0) != m) detail::shape_mismatch("concat_cols", parts[0], p);
    total += p.dim(1);
  }
  std::vector<T> y(m * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, y.data() + i * total + offset);
    offset += w;
  }
  Tensor<T> out({m, total}, std::move(y));
  bool record = false;
  if (Tape<T>::active()) {
    for (const auto& p : parts) record = record || p.requires_grad();
  }
  if (!record) return out;
  std::vector<typename Tape<T>::ImplPtr> inputs;
  for (const auto& p : parts) inputs.push_back(p.impl());
  auto captured = inputs;
  return detail::attach<T>(out, "concat_cols", std::move(inputs),
                           [captured, m, total](const std::vector<T>& g) {
                             std::size_t offset = 0;
                             for (const auto& ip : captured) {
                               const std::size_t w = ip->shape[1];
                               if (ip->requires_grad) {
                                 auto& gp = ip->grad_buffer();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + offset + j];
                               }
                               offset += w;
                             }
                           });
}

/// Selects rows of an (m,n) matrix; rows may repeat. Backward scatter-adds.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  detail::require_rank2("gather_rows", a);
  if (rows.empty()) throw ConfigError("gather_rows: empty index set");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> y(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw ConfigError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " + shape_str(a.shape()));
    std::copy_n(a.data().data() + rows[r] * n, n, y.data() + r * n);
  }
  Tensor<T> out({rows.size(), n}, std::move(y));
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::attach<T>(out, "gather_rows", {ia}, [ia, n, idx = std::move(idx)](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
  });
}

/// Mean of the selected rows of an (m,n) matrix, returned with shape (n).
template <class T>
Tensor<T> masked_mean(const Tensor<T>& a, std::span<const std::size_t> rows) {
  detail::require_rank2("masked_mean", a);
  if (rows.empty()) throw UsageError("masked_mean: empty index set");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> y(n, T(0));
  for (auto r : rows) {
    if (r >= m) throw ConfigError("masked_mean: row " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
    const T* src = a.data().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += src[j];
  }
  const T inv = T(1) / T(rows.size());
  for (auto& v : y) v *= inv;
  Tensor<T> out({n}, std::move(y));
  if (!detail::should_record<T>({&a})) return out;
  auto ia = a.impl();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::attach<T>(out, "masked_mean", {ia}, [ia, n, inv, idx = std::move(idx)](const std::vector<T>& g) {
    auto& ga = ia->grad_buffer();
    for (auto r : idx)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j] * inv;
  });
}

/// Mean squared error over all entries.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("mse", a, b);
  const std::size_t n = a.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  Tensor<T> out = Tensor<T>::scalar(s / T(n));
  if (!detail::should_record<T>({&a, &b})) return out;
  auto ia = a.impl(), ib = b.impl();
  return detail::attach<T>(out, "mse", {ia, ib}, [ia, ib, n](const std::vector<T>& g) {
    const T k = T(2) * g[0] / T(n);
    auto* ga = detail::grad_of<T>(ia);
    auto* gb = detail::grad_of<T>(ib);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = ia->data[i] - ib->data[i];
      if (ga) (*ga)[i] += k * d;
      if (gb) (*gb)[i] -= k * d;
    }
  });
}

/// Mean cross-entropy of (m,C) logits against integer targets. Rows whose
/// target equals ignore_index contribute zero loss and zero gradient; with no
/// valid rows the loss is 0.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_index = kIgnoreIndex) {
  detail::require_rank2("cross_entropy", logits);
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (targets.size() != m) {
    throw ConfigError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                      shape_str(logits.shape()));
  }
  std::vector<T> probs(m * c);
  std::size_t valid = 0;
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw ConfigError("cross_entropy: target " + std::to_string(targets[i]) + " outside " + std::to_string(c) + " classes");
    }
    const T* x = logits.data().data() + i * c;
    T* p = probs.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += p[j] = std::exp(x[j] - mx);
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    total += -(x[targets[i]] - mx - std::log(z));
    ++valid;
  }
  Tensor<T> out = Tensor<T>::scalar(valid ? total / T(valid) : T(0));
  if (!detail::should_record<T>({&logits})) return out;
  auto il = logits.impl();
  std::vector<int> tgt(targets.begin(), targets.end());
  return detail::attach<T>(
      out, "cross_entropy", {il},
      [il, m, c, valid, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](const std::vector<T>& g) {
        if (valid == 0) return;
        auto& gl = il->grad_buffer();
        const T k = g[0] / T(valid);
        for (std::size_t i = 0; i < m; ++i) {
          if (tgt[i] == ignore_index) continue;
          for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += k * probs[i * c + j];
          gl[i * c + tgt[i]] -= k;
        }
      });
}

}  // namespace satslab
