#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "kanet/tensor.hpp"

namespace kanet {

inline constexpr double kCosineEps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kLogClamp = 1e-12;

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

/// Reverse-mode differentiation tape.
///
/// Every op appends one node whose parents were recorded earlier, so insertion
/// order is a topological order and backward() is a single reverse sweep.
/// A node carries gradient storage only if some ancestor is a parameter or
/// variable; constants (frozen weights, the knowledge library) never do.
/// Backward closures capture `this`, so a Tape is pinned in memory.
template <std::floating_point T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves -------------------------------------------------------------

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Non-owning constant; `value` must outlive the tape.
  Var constant_ref(const Tensor<T>& value) { return push_external(value, false); }

  /// Non-owning trainable leaf; `value` must outlive the tape.
  Var parameter(const Tensor<T>& value) { return push_external(value, true); }

  /// Owning trainable leaf.
  Var variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  // ---- access -------------------------------------------------------------

  const Tensor<T>& value(Var v) const { return node(v).value(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. `v`.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (!n.requires_grad) throw ArgumentError("grad: node does not require gradients");
    if (n.grad.empty()) return Tensor<T>(n.value().shape());
    return Tensor<T>(n.value().shape(), n.grad);
  }

  /// True if gradient storage was allocated for `v` during backward().
  bool has_grad_storage(Var v) const { return !node(v).grad.empty(); }

  T scalar(Var v) const {
    const auto& t = value(v);
    if (t.size() != 1) throw ArgumentError("scalar: value has " + std::to_string(t.size()) + " elements");
    return t[0];
  }

  // ---- ops ----------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (B.rows() != k) {
      throw DimensionError("matmul: inner dimensions differ " + shape_string(A.shape()) + " x " +
                           shape_string(B.shape()));
    }
    Tensor<T> C({m, n});
    gemm(A.data().data(), B.data().data(), C.data().data(), m, k, n);
    return push(std::move(C), any_grad(a, b), [this, a, b, m, k, n](const std::vector<T>& dC) {
      const T* Ad = value(a).data().data();
      const T* Bd = value(b).data().data();
      if (auto* dA = grad_buffer(a)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc{0};
            const T* brow = Bd + p * n;
            const T* grow = dC.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            (*dA)[i * k + p] += acc;
          }
      }
      if (auto* dB = grad_buffer(b)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = Ad[i * k + p];
            if (aip == T{0}) continue;
            T* drow = dB->data() + p * n;
            const T* grow = dC.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
          }
      }
    });
  }

  Var transpose(Var a) {
    const auto& A = value(a);
    const std::size_t m = A.rows(), n = A.cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out(j, i) = A(i, j);
    return push(std::move(out), any_grad(a), [this, a, m, n](const std::vector<T>& g) {
      auto* dA = grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*dA)[i * n + j] += g[j * m + i];
    });
  }

  Var add(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.size() != B.size() || A.cols() != B.cols()) {
      throw DimensionError("add: shapes differ " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    }
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push(std::move(out), any_grad(a, b), [this, a, b](const std::vector<T>& g) {
      for (Var p : {a, b})
        if (auto* d = grad_buffer(p))
          for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    });
  }

  /// a (m x n) + bias (n), broadcast over rows.
  Var add_bias(Var a, Var bias) {
    const auto& A = value(a);
    const auto& Bv = value(bias);
    const std::size_t m = A.rows(), n = A.cols();
    if (Bv.size() != n) throw DimensionError("add_bias: bias length must equal column count");
    Tensor<T> out = A;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) += Bv[j];
    return push(std::move(out), any_grad(a, bias), [this, a, bias, m, n](const std::vector<T>& g) {
      if (auto* dA = grad_buffer(a))
        for (std::size_t i = 0; i < g.size(); ++i) (*dA)[i] += g[i];
      if (auto* dB = grad_buffer(bias))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) (*dB)[j] += g[i * n + j];
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.data()) v *= c;
    return push(std::move(out), any_grad(a), [this, a, c](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += c * g[i];
    });
  }

  /// Exact GELU: x * Phi(x).
  Var gelu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data()) v = v * normal_cdf(v);
    return push(std::move(out), any_grad(a), [this, a](const std::vector<T>& g) {
      const auto& x = value(a);
      auto* d = grad_buffer(a);
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T xi = x[i];
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
        (*d)[i] += g[i] * (normal_cdf(xi) + xi * pdf);
      }
    });
  }

  /// Row-wise softmax, exp(x - max) / sum.
  Var softmax_rows(Var a) {
    const auto& A = value(a);
    if (A.size() == 0) throw ArgumentError("softmax: empty input");
    const std::size_t m = A.rows(), n = A.cols();
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < m; ++i) softmax_row(A.row(i), out.row(i));
    return push(std::move(out), any_grad(a), [this, a, m, n, self = next_id()](const std::vector<T>& g) {
      const auto& y = nodes_[self].value();
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y(i, j);
        for (std::size_t j = 0; j < n; ++j) (*d)[i * n + j] += y(i, j) * (g[i * n + j] - dot);
      }
    });
  }

  /// Row-wise layer normalization over the last dimension.
  Var layernorm(Var x, Var gamma, Var beta) {
    const auto& X = value(x);
    const auto& G = value(gamma);
    const auto& B = value(beta);
    const std::size_t m = X.rows(), n = X.cols();
    if (G.size() != n || B.size() != n) throw DimensionError("layernorm: gamma/beta length must equal last dim");
    Tensor<T> out(X.shape());
    std::vector<T> xhat(X.size());
    std::vector<T> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto r = X.row(i);
      T mean{0};
      for (T v : r) mean += v;
      mean /= T(n);
      T var{0};
      for (T v : r) var += (v - mean) * (v - mean);
      var /= T(n);
      inv_std[i] = T(1) / std::sqrt(var + T(kLayerNormEps));
      for (std::size_t j = 0; j < n; ++j) {
        xhat[i * n + j] = (r[j] - mean) * inv_std[i];
        out(i, j) = G[j] * xhat[i * n + j] + B[j];
      }
    }
    return push(std::move(out), any_grad(x, gamma, beta),
                [this, x, gamma, beta, m, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](const std::vector<T>& g) {
                  const auto& Gv = value(gamma);
                  auto* dG = grad_buffer(gamma);
                  auto* dB = grad_buffer(beta);
                  auto* dX = grad_buffer(x);
                  std::vector<T> dxhat(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    T sum_d{0}, sum_dx{0};
                    for (std::size_t j = 0; j < n; ++j) {
                      const T gij = g[i * n + j];
                      if (dG) (*dG)[j] += gij * xhat[i * n + j];
                      if (dB) (*dB)[j] += gij;
                      dxhat[j] = gij * Gv[j];
                      sum_d += dxhat[j];
                      sum_dx += dxhat[j] * xhat[i * n + j];
                    }
                    if (dX) {
                      for (std::size_t j = 0; j < n; ++j) {
                        (*dX)[i * n + j] +=
                            inv_std[i] / T(n) * (T(n) * dxhat[j] - sum_d - xhat[i * n + j] * sum_dx);
                      }
                    }
                  }
                });
  }

  /// Mean over rows: (m x n) -> (1 x n).
  Var mean_rows(Var a) {
    const auto& A = value(a);
    const std::size_t m = A.rows(), n = A.cols();
    if (m == 0) throw ArgumentError("mean_rows: no rows");
    Tensor<T> out({1, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += A(i, j);
    for (auto& v : out.data()) v /= T(m);
    return push(std::move(out), any_grad(a), [this, a, m, n](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*d)[i * n + j] += g[j] / T(m);
    });
  }

  /// Sum of all elements -> scalar.
  Var sum(Var a) {
    const auto& A = value(a);
    T s{0};
    for (T v : A.data()) s += v;
    return push(Tensor<T>({1}, std::vector<T>{s}), any_grad(a), [this, a](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (auto& v : *d) v += g[0];
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    const std::size_t n = value(parts[0]).cols();
    std::size_t total = 0;
    bool req = false;
    for (Var p : parts) {
      if (value(p).cols() != n) throw DimensionError("concat_rows: column counts differ");
      total += value(p).rows();
      req = req || requires_grad(p);
    }
    Tensor<T> out({total, n});
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& P = value(p);
      std::copy(P.data().begin(), P.data().end(), out.data().begin() + off);
      off += P.size();
    }
    return push(std::move(out), req, [this, ps = std::vector<Var>(parts.begin(), parts.end())](const std::vector<T>& g) {
      std::size_t off = 0;
      for (Var p : ps) {
        const std::size_t len = value(p).size();
        if (auto* d = grad_buffer(p))
          for (std::size_t i = 0; i < len; ++i) (*d)[i] += g[off + i];
        off += len;
      }
    });
  }

  Var concat_rows(std::initializer_list<Var> parts) { return concat_rows(std::span<const Var>(parts.begin(), parts.size())); }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
    const std::size_t m = value(parts[0]).rows();
    std::size_t total = 0;
    bool req = false;
    for (Var p : parts) {
      if (value(p).rows() != m) throw DimensionError("concat_cols: row counts differ");
      total += value(p).cols();
      req = req || requires_grad(p);
    }
    Tensor<T> out({m, total});
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& P = value(p);
      for (std::size_t i = 0; i < m; ++i) std::copy(P.row(i).begin(), P.row(i).end(), out.row(i).begin() + off);
      off += P.cols();
    }
    return push(std::move(out), req,
                [this, m, total, ps = std::vector<Var>(parts.begin(), parts.end())](const std::vector<T>& g) {
                  std::size_t off = 0;
                  for (Var p : ps) {
                    const std::size_t w = value(p).cols();
                    if (auto* d = grad_buffer(p))
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) (*d)[i * w + j] += g[i * total + off + j];
                    off += w;
                  }
                });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    const auto& A = value(a);
    const std::size_t n = A.cols();
    if (begin + count > A.rows()) throw DimensionError("slice_rows: range out of bounds");
    Tensor<T> out({count, n});
    std::copy(A.data().begin() + begin * n, A.data().begin() + (begin + count) * n, out.data().begin());
    return push(std::move(out), any_grad(a), [this, a, begin, n](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[begin * n + i] += g[i];
    });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const auto& A = value(a);
    const std::size_t m = A.rows(), n = A.cols();
    if (begin + count > n) throw DimensionError("slice_cols: range out of bounds");
    Tensor<T> out({m, count});
    for (std::size_t i = 0; i < m; ++i)
      std::copy(A.row(i).begin() + begin, A.row(i).begin() + begin + count, out.row(i).begin());
    return push(std::move(out), any_grad(a), [this, a, begin, count, m, n](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) (*d)[i * n + begin + j] += g[i * count + j];
    });
  }

  /// Pairwise cosine similarity between rows: (n x D), (m x D) -> (n x m).
  /// The norm product is clamped below at kCosineEps, so a zero row yields 0.
  Var cosine_rows(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    const std::size_t n = A.rows(), m = B.rows(), D = A.cols();
    if (B.cols() != D) throw DimensionError("cosine: vector lengths differ");
    if (D == 0) throw ArgumentError("cosine: zero-length vectors");
    std::vector<T> na(n), nb(m);
    for (std::size_t i = 0; i < n; ++i) na[i] = norm(A.row(i));
    for (std::size_t j = 0; j < m; ++j) nb[j] = norm(B.row(j));
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out(i, j) = dot(A.row(i), B.row(j)) / std::max(na[i] * nb[j], T(kCosineEps));
    return push(std::move(out), any_grad(a, b),
                [this, a, b, n, m, D, na = std::move(na), nb = std::move(nb),
                 self = next_id()](const std::vector<T>& g) {
                  const auto& A = value(a);
                  const auto& B = value(b);
                  const auto& C = nodes_[self].value();
                  auto* dA = grad_buffer(a);
                  auto* dB = grad_buffer(b);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                      const T gij = g[i * m + j];
                      if (gij == T{0}) continue;
                      const T prod = na[i] * nb[j];
                      const T* ar = A.row(i).data();
                      const T* br = B.row(j).data();
                      if (prod > T(kCosineEps)) {
                        const T inv = T(1) / prod;
                        const T c = C(i, j);
                        if (dA) {
                          const T sa = c / (na[i] * na[i]);
                          for (std::size_t k = 0; k < D; ++k) (*dA)[i * D + k] += gij * (br[k] * inv - sa * ar[k]);
                        }
                        if (dB) {
                          const T sb = c / (nb[j] * nb[j]);
                          for (std::size_t k = 0; k < D; ++k) (*dB)[j * D + k] += gij * (ar[k] * inv - sb * br[k]);
                        }
                      } else {
                        const T inv = T(1) / T(kCosineEps);
                        if (dA)
                          for (std::size_t k = 0; k < D; ++k) (*dA)[i * D + k] += gij * br[k] * inv;
                        if (dB)
                          for (std::size_t k = 0; k < D; ++k) (*dB)[j * D + k] += gij * ar[k] * inv;
                      }
                    }
                });
  }

  /// Cosine of two vectors, as a 1-element tensor.
  Var cosine(Var a, Var b) {
    if (value(a).size() != value(b).size()) throw DimensionError("cosine: vector lengths differ");
    if (value(a).rows() != 1 || value(b).rows() != 1) throw DimensionError("cosine: expects vectors");
    return reshape(cosine_rows(a, b), {1});
  }

  /// Mean over the batch of -log(max(p[y], kLogClamp)).
  Var cross_entropy(Var probs, std::span<const std::size_t> labels) {
    const auto& P = value(probs);
    const std::size_t B = P.rows(), C = P.cols();
    if (labels.size() != B) throw DimensionError("cross_entropy: one label per row required");
    if (B == 0) throw ArgumentError("cross_entropy: empty batch");
    const T tol = T(1e-6) + T(C) * std::numeric_limits<T>::epsilon();
    T loss{0};
    for (std::size_t i = 0; i < B; ++i) {
      if (labels[i] >= C) throw ArgumentError("cross_entropy: label out of range");
      T s{0};
      for (T v : P.row(i)) s += v;
      if (std::abs(s - T(1)) > tol) throw ArgumentError("cross_entropy: row does not sum to 1");
      loss -= std::log(std::max(P(i, labels[i]), T(kLogClamp)));
    }
    loss /= T(B);
    return push(Tensor<T>({1}, std::vector<T>{loss}), any_grad(probs),
                [this, probs, B, C, ls = std::vector<std::size_t>(labels.begin(), labels.end())](const std::vector<T>& g) {
                  const auto& P = value(probs);
                  auto* d = grad_buffer(probs);
                  for (std::size_t i = 0; i < B; ++i) {
                    const T p = P(i, ls[i]);
                    if (p > T(kLogClamp)) (*d)[i * C + ls[i]] -= g[0] / (T(B) * p);
                  }
                });
  }

  Var reshape(Var a, Shape shape) {
    Tensor<T> out = value(a).reshaped(std::move(shape));
    return push(std::move(out), any_grad(a), [this, a](const std::vector<T>& g) {
      auto* d = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    });
  }

  /// x W + b for a row-major weight W of shape (in x out).
  Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

  // ---- backward -----------------------------------------------------------

  /// Populate gradients of the scalar `loss` w.r.t. every node that requires them.
  void backward(Var loss) {
    Node& root = node(loss);
    if (root.value().size() != 1) throw ArgumentError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.clear();
    if (!root.requires_grad) return;
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.value().size(), T{0});
    root.grad[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    std::function<void(const std::vector<T>&)> backward;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  static T normal_cdf(T x) { return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)); }

  static T dot(std::span<const T> a, std::span<const T> b) {
    T s{0};
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
  static T norm(std::span<const T> a) { return std::sqrt(dot(a, a)); }

  static void softmax_row(std::span<const T> in, std::span<T> out) {
    T mx = in[0];
    for (T v : in) mx = std::max(mx, v);
    T s{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      s += out[j];
    }
    for (auto& v : out) v /= s;
  }

  static void gemm(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        if (aip == T{0}) continue;
        const T* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ArgumentError("tape: unknown variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ArgumentError("tape: unknown variable");
    return nodes_[v.id];
  }

  std::uint32_t next_id() const { return static_cast<std::uint32_t>(nodes_.size()); }

  template <class... Vs>
  bool any_grad(Vs... vs) const {
    return (requires_grad(vs) || ...);
  }

  std::vector<T>* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    return n.requires_grad ? &n.grad : nullptr;
  }

  Var push(Tensor<T> value, bool requires_grad, std::function<void(const std::vector<T>&)> bw) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_external(const Tensor<T>& value, bool requires_grad) {
    Node n;
    n.external = &value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

}  // namespace kanet
