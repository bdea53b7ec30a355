#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "kanet/autodiff.hpp"

namespace kanet {

/// Weights of one post-norm transformer block: multi-head attention, then a
/// GELU MLP of width 4D, each followed by residual add and layernorm.
/// Linear weights are stored (in x out) so a row vector multiplies from the left.
template <std::floating_point T>
struct BlockParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_gamma, ln2_beta;

  /// Gaussian(0, stddev) weights, zero biases, identity layernorms.
  template <class Rng>
  static BlockParams init(std::size_t dim, std::size_t heads, Rng& rng, T stddev, bool zero_output_projection = false) {
    if (heads == 0 || dim % heads != 0) throw ConfigError("block: embed dim must be divisible by head count");
    BlockParams p;
    p.dim = dim;
    p.heads = heads;
    const std::size_t hidden = 4 * dim;
    p.wq = Tensor<T>::randn({dim, dim}, rng, stddev);
    p.wk = Tensor<T>::randn({dim, dim}, rng, stddev);
    p.wv = Tensor<T>::randn({dim, dim}, rng, stddev);
    p.wo = zero_output_projection ? Tensor<T>({dim, dim}) : Tensor<T>::randn({dim, dim}, rng, stddev);
    p.bq = Tensor<T>({dim});
    p.bk = Tensor<T>({dim});
    p.bv = Tensor<T>({dim});
    p.bo = Tensor<T>({dim});
    p.ln1_gamma = Tensor<T>({dim}, T{1});
    p.ln1_beta = Tensor<T>({dim});
    p.w1 = Tensor<T>::randn({dim, hidden}, rng, stddev);
    p.b1 = Tensor<T>({hidden});
    p.w2 = Tensor<T>::randn({hidden, dim}, rng, stddev);
    p.b2 = Tensor<T>({dim});
    p.ln2_gamma = Tensor<T>({dim}, T{1});
    p.ln2_beta = Tensor<T>({dim});
    return p;
  }

  /// Fixed serialization / optimizer order.
  std::vector<Tensor<T>*> tensors() {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gamma, &ln1_beta,
            &w1, &b1, &w2, &b2, &ln2_gamma, &ln2_beta};
  }
  std::vector<const Tensor<T>*> tensors() const {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gamma, &ln1_beta,
            &w1, &b1, &w2, &b2, &ln2_gamma, &ln2_beta};
  }
};

/// BlockParams bound to a tape.
struct BlockVars {
  std::size_t heads = 1;
  Var wq, bq, wk, bk, wv, bv, wo, bo, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta;
};

/// Record the block's weights as trainable parameters or frozen constants.
/// Either way the tape only references them.
template <std::floating_point T>
BlockVars bind_block(Tape<T>& tape, const BlockParams<T>& p, bool trainable) {
  auto leaf = [&](const Tensor<T>& t) { return trainable ? tape.parameter(t) : tape.constant_ref(t); };
  BlockVars v;
  v.heads = p.heads;
  v.wq = leaf(p.wq);
  v.bq = leaf(p.bq);
  v.wk = leaf(p.wk);
  v.bk = leaf(p.bk);
  v.wv = leaf(p.wv);
  v.bv = leaf(p.bv);
  v.wo = leaf(p.wo);
  v.bo = leaf(p.bo);
  v.ln1_gamma = leaf(p.ln1_gamma);
  v.ln1_beta = leaf(p.ln1_beta);
  v.w1 = leaf(p.w1);
  v.b1 = leaf(p.b1);
  v.w2 = leaf(p.w2);
  v.b2 = leaf(p.b2);
  v.ln2_gamma = leaf(p.ln2_gamma);
  v.ln2_beta = leaf(p.ln2_beta);
  return v;
}

/// Bound tensors in BlockParams::tensors() order.
inline std::vector<Var> block_var_list(const BlockVars& v) {
  return {v.wq, v.bq, v.wk, v.bk, v.wv, v.bv, v.wo, v.bo, v.ln1_gamma, v.ln1_beta,
          v.w1, v.b1, v.w2, v.b2, v.ln2_gamma, v.ln2_beta};
}

/// Multi-head attention of `query` rows over `context` rows, before the output
/// projection's residual. If `weights_out` is given, the per-head post-softmax
/// weights (each query_rows x context_rows) are appended to it.
template <std::floating_point T>
Var multi_head_attention(Tape<T>& tape, Var query, Var context, const BlockVars& p,
                         std::vector<Var>* weights_out = nullptr) {
  const std::size_t dim = tape.value(query).cols();
  const std::size_t head_dim = dim / p.heads;
  const Var q = tape.linear(query, p.wq, p.bq);
  const Var k = tape.linear(context, p.wk, p.bk);
  const Var v = tape.linear(context, p.wv, p.bv);
  const T scale = T(1) / std::sqrt(T(head_dim));
  std::vector<Var> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Var qh = tape.slice_cols(q, h * head_dim, head_dim);
    const Var kh = tape.slice_cols(k, h * head_dim, head_dim);
    const Var vh = tape.slice_cols(v, h * head_dim, head_dim);
    const Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
    const Var attn = tape.softmax_rows(scores);
    if (weights_out) weights_out->push_back(attn);
    heads.push_back(tape.matmul(attn, vh));
  }
  const Var merged = p.heads == 1 ? heads.front() : tape.concat_cols(heads);
  return tape.linear(merged, p.wo, p.bo);
}

/// Post-norm block: h = LN1(query + MHA(query, context)); out = LN2(h + MLP(h)).
/// Self-attention when context == query.
template <std::floating_point T>
Var transformer_block(Tape<T>& tape, Var query, Var context, const BlockVars& p,
                      std::vector<Var>* weights_out = nullptr) {
  const Var attn = multi_head_attention(tape, query, context, p, weights_out);
  const Var h = tape.layernorm(tape.add(query, attn), p.ln1_gamma, p.ln1_beta);
  const Var mlp = tape.linear(tape.gelu(tape.linear(h, p.w1, p.b1)), p.w2, p.b2);
  return tape.layernorm(tape.add(h, mlp), p.ln2_gamma, p.ln2_beta);
}

}  // namespace kanet
