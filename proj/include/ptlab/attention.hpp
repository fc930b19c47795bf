// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Causal attention in two interchangeable forms — the matrix/softmax form
// and the per-token similarity form with sim(q,k) = exp(q·k/√d_k) — plus
// multi-head and grouped-query composition. The two single-head forms are
// implemented through disjoint code paths so each serves as the other's
// oracle.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ptlab/tensor.hpp"

namespace ptlab {

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t d_k = 0;
  std::size_t d_v = 0;
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;  // divides n_heads; equality means standard MHA
  bool causal = true;

  void validate() const {
    if (d_model < 1 || d_k < 1 || d_v < 1)
      throw std::invalid_argument("AttentionConfig: d_model, d_k, d_v must all be >= 1");
    if (n_heads < 1 || n_kv_heads < 1)
      throw std::invalid_argument("AttentionConfig: head counts must be >= 1");
    if (n_heads % n_kv_heads != 0)
      throw std::invalid_argument("AttentionConfig: n_kv_heads must divide n_heads");
  }

  std::size_t group_size() const { return n_heads / n_kv_heads; }

  // Contiguous grouping: query head h reads KV head floor(h / group_size).
  std::size_t kv_head_for(std::size_t h) const { return h / group_size(); }
};

// One query head's view of the projections (KV tensors may be shared with
// sibling heads under GQA — Tensor handles alias the same storage).
struct HeadWeights {
  Tensor w_q;  // [d_model x d_k]
  Tensor w_k;  // [d_model x d_k]
  Tensor w_v;  // [d_model x d_v]
};

struct AttentionWeights {
  std::vector<Tensor> w_q;  // n_heads entries
  std::vector<Tensor> w_k;  // n_kv_heads entries
  std::vector<Tensor> w_v;  // n_kv_heads entries
  Tensor w_o;               // [n_heads*d_v x d_model]; required for multi-head only

  static AttentionWeights init(const AttentionConfig& cfg, SplitRng& rng, double stddev = 0.08) {
    cfg.validate();
    AttentionWeights w;
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      w.w_q.push_back(random_tensor(cfg.d_model, cfg.d_k, rng, stddev));
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
      w.w_k.push_back(random_tensor(cfg.d_model, cfg.d_k, rng, stddev));
      w.w_v.push_back(random_tensor(cfg.d_model, cfg.d_v, rng, stddev));
    }
    w.w_o = random_tensor(cfg.n_heads * cfg.d_v, cfg.d_model, rng, stddev);
    return w;
  }

  void check(const AttentionConfig& cfg) const {
    cfg.validate();
    if (w_q.size() != cfg.n_heads)
      throw std::invalid_argument("AttentionWeights: W_Q count " + std::to_string(w_q.size()) +
                                  " does not match n_heads " + std::to_string(cfg.n_heads));
    if (w_k.size() != cfg.n_kv_heads || w_v.size() != cfg.n_kv_heads)
      throw std::invalid_argument("AttentionWeights: W_K/W_V count does not match n_kv_heads " +
                                  std::to_string(cfg.n_kv_heads));
    for (const Tensor& t : w_q)
      if (t.rows() != cfg.d_model || t.cols() != cfg.d_k)
        throw std::invalid_argument("AttentionWeights: W_Q shape mismatch");
    for (const Tensor& t : w_k)
      if (t.rows() != cfg.d_model || t.cols() != cfg.d_k)
        throw std::invalid_argument("AttentionWeights: W_K shape mismatch");
    for (const Tensor& t : w_v)
      if (t.rows() != cfg.d_model || t.cols() != cfg.d_v)
        throw std::invalid_argument("AttentionWeights: W_V shape mismatch");
  }

  HeadWeights head(const AttentionConfig& cfg, std::size_t h) const {
    if (h >= cfg.n_heads)
      throw std::out_of_range("AttentionWeights::head: head index " + std::to_string(h) +
                              " out of range for n_heads " + std::to_string(cfg.n_heads));
    std::size_t kv = cfg.kv_head_for(h);
    return HeadWeights{w_q[h], w_k[kv], w_v[kv]};
  }

  void set_trainable(bool on) {
    for (Tensor& t : w_q) t.set_requires_grad(on);
    for (Tensor& t : w_k) t.set_requires_grad(on);
    for (Tensor& t : w_v) t.set_requires_grad(on);
    if (w_o.valid()) w_o.set_requires_grad(on);
  }
};

namespace detail {
inline void check_head_shapes(const Tensor& x, const HeadWeights& hw, const AttentionConfig& cfg,
                              const char* op) {
  if (!x.valid() || x.rows() < 1) throw std::invalid_argument(std::string(op) + ": empty input");
  if (x.cols() != cfg.d_model)
    throw std::invalid_argument(std::string(op) + ": input width " + std::to_string(x.cols()) +
                                " does not match d_model " + std::to_string(cfg.d_model));
  if (hw.w_q.rows() != cfg.d_model || hw.w_q.cols() != cfg.d_k ||
      hw.w_k.rows() != cfg.d_model || hw.w_k.cols() != cfg.d_k ||
      hw.w_v.rows() != cfg.d_model || hw.w_v.cols() != cfg.d_v)
    throw std::invalid_argument(std::string(op) + ": projection shape mismatch");
}
}  // namespace detail

// Matrix form: O = softmax(QK^T/sqrt(d_k) + mask) V. Differentiable. When
// probs_out is given, receives a detached copy of the post-softmax weights.
inline Tensor attn_matrix_form(const Tensor& x, const HeadWeights& hw, const AttentionConfig& cfg,
                               Tensor* probs_out = nullptr) {
  detail::check_head_shapes(x, hw, cfg, "attn_matrix_form");
  std::size_t n = x.rows();
  Tensor q = matmul(x, hw.w_q);
  Tensor k = matmul(x, hw.w_k);
  Tensor v = matmul(x, hw.w_v);
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
  Tensor probs = softmax_rows(logits, cfg.causal ? causal_mask(n) : Tensor());
  if (probs_out) *probs_out = probs.detached_copy();
  return matmul(probs, v);
}

// Token form: o_i = sum_{j<=i} sim(q_i,k_j) v_j / sum_{j<=i} sim(q_i,k_j),
// sim(q,k) = exp(q·k/sqrt(d_k)), accumulated per query with the max exponent
// factored out. Plain loops, no tape — the reference route.
inline Tensor attn_token_form(const Tensor& x, const HeadWeights& hw, const AttentionConfig& cfg) {
  detail::check_head_shapes(x, hw, cfg, "attn_token_form");
  TapePause pause;
  std::size_t n = x.rows(), d = cfg.d_model, dk = cfg.d_k, dv = cfg.d_v;
  const double* px = x.values().data();
  const double* wq = hw.w_q.values().data();
  const double* wk = hw.w_k.values().data();
  const double* wv = hw.w_v.values().data();

  // hand-rolled projections
  std::vector<double> q(n * dk, 0.0), k(n * dk, 0.0), v(n * dv, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      double xv = px[i * d + a];
      for (std::size_t b = 0; b < dk; ++b) {
        q[i * dk + b] += xv * wq[a * dk + b];
        k[i * dk + b] += xv * wk[a * dk + b];
      }
      for (std::size_t b = 0; b < dv; ++b) v[i * dv + b] += xv * wv[a * dv + b];
    }
  }

  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor out = Tensor::zeros(n, dv);
  double* po = out.mutable_values().data();
  std::vector<double> dots(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t limit = cfg.causal ? i + 1 : n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) {
      double dot = 0.0;
      for (std::size_t b = 0; b < dk; ++b) dot += q[i * dk + b] * k[j * dk + b];
      dots[j] = dot * inv_sqrt;
      mx = std::max(mx, dots[j]);
    }
    double den = 0.0;
    std::vector<double> num(dv, 0.0);
    for (std::size_t j = 0; j < limit; ++j) {
      double sim = std::exp(dots[j] - mx);
      den += sim;
      for (std::size_t b = 0; b < dv; ++b) num[b] += sim * v[j * dv + b];
    }
    for (std::size_t b = 0; b < dv; ++b) po[i * dv + b] = num[b] / den;
  }
  detail::check_finite(*out.impl(), "attn_token_form");
  return out;
}

// Replaces the per-head computation inside multi_head_forward; this is how
// the PEFT variants drop into a frozen multi-head layer.
using HeadForward = std::function<Tensor(std::size_t head, const HeadWeights& hw)>;

// Concatenates per-head outputs and projects by W_O. Under GQA the per-head
// view shares KV projections in contiguous groups. head_probs, when given,
// collects each head's detached post-softmax weights (default path only).
inline Tensor multi_head_forward(const Tensor& x, const AttentionWeights& w,
                                 const AttentionConfig& cfg, const HeadForward& head_fn = {},
                                 std::vector<Tensor>* head_probs = nullptr) {
  w.check(cfg);
  if (!w.w_o.valid())
    throw std::invalid_argument("multi_head_forward: W_O projection is required");
  if (w.w_o.rows() != cfg.n_heads * cfg.d_v || w.w_o.cols() != cfg.d_model)
    throw std::invalid_argument("multi_head_forward: W_O shape mismatch");
  Tensor acc;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    HeadWeights hw = w.head(cfg, h);
    Tensor oh;
    if (head_fn) {
      oh = head_fn(h, hw);
    } else {
      Tensor probs;
      oh = attn_matrix_form(x, hw, cfg, head_probs ? &probs : nullptr);
      if (head_probs) head_probs->push_back(probs);
    }
    if (oh.rows() != x.rows() || oh.cols() != cfg.d_v)
      throw std::invalid_argument("multi_head_forward: head output shape mismatch");
    acc = acc.valid() ? concat_cols(acc, oh) : oh;
  }
  return matmul(acc, w.w_o);
}

}  // namespace ptlab
