#pragma once

// Brute-force reference implementations used by the tests. Everything here is
// written directly from the definitions with plain loops over doubles and
// shares no code with the library beyond the parameter containers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "kanet/knowledge_adapter.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

template <class T>
Mat to_mat(const kanet::Tensor<T>& t) {
  const std::size_t r = t.ndim() == 1 ? 1 : t.shape()[0];
  const std::size_t c = t.ndim() == 1 ? t.shape()[0] : t.shape()[1];
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = static_cast<double>(t[i * c + j]);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat add_row(Mat a, const std::vector<double>& bias) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  return a;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - m);
  for (double& v : e) v /= s;
  return e;
}

inline std::vector<double> layernorm(const std::vector<double>& x, const std::vector<double>& g,
                                     const std::vector<double>& b, double eps = 1e-5) {
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <class T>
std::vector<double> vec(const kanet::Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

/// Per-head attention of a single query row over the context rows.
template <class T>
Mat attention_weights(const std::vector<double>& query, const Mat& context, const kanet::BlockParams<T>& p) {
  const std::size_t D = p.dim, H = p.heads, dh = D / H;
  const Mat q = add_row(matmul(Mat{query}, to_mat(p.wq)), vec(p.bq));
  const Mat k = add_row(matmul(context, to_mat(p.wk)), vec(p.bk));
  Mat out(H);
  for (std::size_t h = 0; h < H; ++h) {
    std::vector<double> scores(context.size());
    for (std::size_t j = 0; j < context.size(); ++j) {
      double s = 0.0;
      for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) s += q[0][d] * k[j][d];
      scores[j] = s / std::sqrt(static_cast<double>(dh));
    }
    out[h] = softmax(scores);
  }
  return out;
}

/// Post-norm cross-attention block for a single query row.
template <class T>
std::vector<double> block(const std::vector<double>& query, const Mat& context, const kanet::BlockParams<T>& p) {
  const std::size_t D = p.dim, dh = D / p.heads;
  const Mat weights = attention_weights(query, context, p);
  const Mat v = add_row(matmul(context, to_mat(p.wv)), vec(p.bv));
  std::vector<double> merged(D, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h)
    for (std::size_t j = 0; j < context.size(); ++j)
      for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) merged[d] += weights[h][j] * v[j][d];
  const auto attn = add_row(matmul(Mat{merged}, to_mat(p.wo)), vec(p.bo))[0];
  std::vector<double> r(D);
  for (std::size_t d = 0; d < D; ++d) r[d] = query[d] + attn[d];
  const auto h1 = layernorm(r, vec(p.ln1_gamma), vec(p.ln1_beta));
  auto hidden = add_row(matmul(Mat{h1}, to_mat(p.w1)), vec(p.b1))[0];
  for (double& x : hidden) x = gelu(x);
  const auto mlp = add_row(matmul(Mat{hidden}, to_mat(p.w2)), vec(p.b2))[0];
  for (std::size_t d = 0; d < D; ++d) r[d] = h1[d] + mlp[d];
  return layernorm(r, vec(p.ln2_gamma), vec(p.ln2_beta));
}

/// Class means, ascending class id.
template <class T>
std::map<int, std::vector<double>> class_means(const std::vector<kanet::Tensor<T>>& rows, const std::vector<int>& labels) {
  std::map<int, std::vector<double>> sum;
  std::map<int, int> count;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& s = sum[labels[i]];
    s.resize(rows[i].size(), 0.0);
    for (std::size_t d = 0; d < rows[i].size(); ++d) s[d] += static_cast<double>(rows[i][d]);
    ++count[labels[i]];
  }
  for (auto& [id, s] : sum)
    for (double& v : s) v /= count[id];
  return sum;
}

/// softmax(alpha * cos(f, w_c)) over the rows of w.
inline std::vector<double> cosine_classifier(const std::vector<double>& f, const Mat& w, double alpha) {
  std::vector<double> logits;
  double nf = 0.0;
  for (double v : f) nf += v * v;
  for (const auto& row : w) {
    double dot = 0.0, nw = 0.0;
    for (std::size_t d = 0; d < f.size(); ++d) {
      dot += f[d] * row[d];
      nw += row[d] * row[d];
    }
    logits.push_back(alpha * dot / std::max(std::sqrt(nf * nw), 1e-12));
  }
  return softmax(logits);
}

/// Central differences of a scalar function with respect to every entry of x.
template <class T>
std::vector<double> numeric_gradient(std::span<T> x, const std::function<double()>& f, T h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Largest per-entry relative error between analytic and numeric gradients.
/// The denominator is floored at 1e-3 of the largest gradient magnitude, so
/// entries many orders below the gradient's scale (where central differences
/// only see rounding noise) are judged against that scale instead.
inline double gradient_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double scale) {
  const double floor = std::max(1e-3 * scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) /
                                std::max({floor, std::abs(analytic[i]), std::abs(numeric[i])}));
  return worst;
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace oracle
