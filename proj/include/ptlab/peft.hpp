// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// The context-based fine-tuning ladder over a frozen attention head:
// demonstration prepending, prefix attention, its convex decomposition with
// alpha mass, the lambda-split rewrite, the kernelized prefix branch, the
// trainable memory (M/N) form, the external-bias form, the in-head hybrid,
// and a LoRA baseline. Every rung is a drop-in replacement for a single
// head's forward pass; consistency between rungs is the test surface.

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ptlab/attention.hpp"
#include "ptlab/tensor.hpp"

namespace ptlab {

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct PrefixParams {
  Tensor s;  // [p x d_model], trainable soft tokens

  std::size_t p() const { return s.valid() ? s.rows() : 0; }

  // Small Gaussian init keeps the initial prefix attention mass low.
  static PrefixParams init(std::size_t p, std::size_t d_model, SplitRng& rng,
                           double stddev = 0.02) {
    PrefixParams out;
    out.s = random_tensor(p, d_model, rng, stddev);
    return out;
  }
};

enum class FeatureMapKind { EluPlusOne, RawElu, ReluAffine };

inline const char* to_string(FeatureMapKind k) {
  switch (k) {
    case FeatureMapKind::EluPlusOne: return "elu-plus-one";
    case FeatureMapKind::RawElu: return "raw-elu";
    case FeatureMapKind::ReluAffine: return "relu-affine";
  }
  return "?";
}

inline FeatureMapKind feature_map_kind_from(const std::string& s) {
  if (s == "elu-plus-one") return FeatureMapKind::EluPlusOne;
  if (s == "raw-elu") return FeatureMapKind::RawElu;
  if (s == "relu-affine") return FeatureMapKind::ReluAffine;
  throw std::invalid_argument("unknown feature map kind: " + s);
}

// Kernel feature map phi. The elu variants are shape-preserving
// (d_phi = d_k); relu-affine carries its own frozen-by-default projection.
// elu-plus-one is the default: its strictly positive output keeps the
// normalized forms' denominators alive. raw-elu exists for the
// no-denominator external-bias path only.
struct FeatureMapSpec {
  FeatureMapKind kind = FeatureMapKind::EluPlusOne;
  Tensor w_phi;  // [d_phi x d_k], relu-affine only
  Tensor b_phi;  // [1 x d_phi], relu-affine only
  bool trainable = false;

  std::size_t d_phi(std::size_t d_k) const {
    return kind == FeatureMapKind::ReluAffine ? w_phi.rows() : d_k;
  }

  void validate(std::size_t d_k) const {
    if (kind != FeatureMapKind::ReluAffine) return;
    if (!w_phi.valid() || !b_phi.valid())
      throw std::invalid_argument("FeatureMapSpec: relu-affine requires W_phi and b_phi");
    if (w_phi.cols() != d_k)
      throw std::invalid_argument("FeatureMapSpec: W_phi column count " +
                                  std::to_string(w_phi.cols()) + " does not match d_k " +
                                  std::to_string(d_k));
    if (w_phi.rows() < 1) throw std::invalid_argument("FeatureMapSpec: d_phi must be >= 1");
    if (b_phi.rows() != 1 || b_phi.cols() != w_phi.rows())
      throw std::invalid_argument("FeatureMapSpec: b_phi must be [1 x d_phi]");
  }

  static FeatureMapSpec elu_plus_one() { return FeatureMapSpec{}; }

  static FeatureMapSpec raw_elu() {
    FeatureMapSpec s;
    s.kind = FeatureMapKind::RawElu;
    return s;
  }

  static FeatureMapSpec relu_affine(std::size_t d_phi, std::size_t d_k, SplitRng& rng) {
    FeatureMapSpec s;
    s.kind = FeatureMapKind::ReluAffine;
    s.w_phi = random_tensor(d_phi, d_k, rng, 1.0 / std::sqrt(static_cast<double>(d_k)));
    s.b_phi = random_tensor(1, d_phi, rng, 0.1);
    return s;
  }
};

// Applies phi row-wise: X [m x d_k] -> [m x d_phi]. Differentiable through
// X, and through W_phi/b_phi when those carry requires_grad.
inline Tensor feature_map_rows(const FeatureMapSpec& phi, const Tensor& x) {
  if (!x.valid()) throw std::invalid_argument("feature_map_rows: empty input");
  phi.validate(x.cols());
  switch (phi.kind) {
    case FeatureMapKind::EluPlusOne:
      return add(elu(x), Tensor::scalar(1.0));
    case FeatureMapKind::RawElu:
      return elu(x);
    case FeatureMapKind::ReluAffine:
      return relu(add(matmul(x, transpose(phi.w_phi)), phi.b_phi));
  }
  throw std::invalid_argument("feature_map_rows: unknown kind");
}

// Single-vector convenience matching the map's pointwise definition.
inline Tensor feature_map_eval(const FeatureMapSpec& phi, const Tensor& x_row) {
  if (x_row.rows() != 1)
    throw std::invalid_argument("feature_map_eval: expected a single row vector");
  return feature_map_rows(phi, x_row);
}

struct PTPlusParams {
  Tensor m;            // [d_phi x d_v], trainable memory
  Tensor n;            // [d_phi x 1], in-head hybrid only
  FeatureMapSpec phi;

  // Zero init ties the adapted model to the base model at step 0.
  static PTPlusParams zero_init(std::size_t d_phi, std::size_t d_v, FeatureMapSpec phi,
                                bool with_n = false) {
    PTPlusParams p;
    p.m = Tensor::zeros(d_phi, d_v);
    if (with_n) p.n = Tensor::zeros(d_phi, 1);
    p.phi = std::move(phi);
    return p;
  }
};

// LoRA factors for the attention projections. One (A, B) pair per adapted
// matrix instance: per query head for W_Q, per KV head for W_K/W_V.
enum LoraTarget : unsigned { kLoraQ = 1u, kLoraK = 2u, kLoraV = 4u };

inline unsigned lora_targets_from(const std::vector<std::string>& names) {
  unsigned t = 0;
  for (const std::string& n : names) {
    if (n == "q") t |= kLoraQ;
    else if (n == "k") t |= kLoraK;
    else if (n == "v") t |= kLoraV;
    else throw std::invalid_argument("unknown LoRA target: " + n);
  }
  return t;
}

struct LoraParams {
  unsigned targets = kLoraQ | kLoraV;
  std::size_t rank = 4;
  std::vector<Tensor> a_q, b_q;  // per query head, [d_model x r], [r x d_k]
  std::vector<Tensor> a_k, b_k;  // per KV head
  std::vector<Tensor> a_v, b_v;  // per KV head, B maps to d_v

  // A is small Gaussian, B is zero, so W + A·B starts exactly at W.
  static LoraParams init(const AttentionConfig& cfg, std::size_t rank, unsigned targets,
                         SplitRng& rng, double stddev = 0.02) {
    cfg.validate();
    auto check_rank = [&](std::size_t d_out) {
      if (rank < 1 || rank > std::min(cfg.d_model, d_out))
        throw std::invalid_argument("LoraParams: rank " + std::to_string(rank) +
                                    " exceeds min(d_model, d_out)");
    };
    LoraParams p;
    p.targets = targets;
    p.rank = rank;
    if (targets & kLoraQ) {
      check_rank(cfg.d_k);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        p.a_q.push_back(random_tensor(cfg.d_model, rank, rng, stddev));
        p.b_q.push_back(Tensor::zeros(rank, cfg.d_k));
      }
    }
    if (targets & kLoraK) {
      check_rank(cfg.d_k);
      for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
        p.a_k.push_back(random_tensor(cfg.d_model, rank, rng, stddev));
        p.b_k.push_back(Tensor::zeros(rank, cfg.d_k));
      }
    }
    if (targets & kLoraV) {
      check_rank(cfg.d_v);
      for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
        p.a_v.push_back(random_tensor(cfg.d_model, rank, rng, stddev));
        p.b_v.push_back(Tensor::zeros(rank, cfg.d_v));
      }
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Ladder rung 0: in-context learning
// ---------------------------------------------------------------------------

// Prepends demonstration embeddings to the input sequence. Downstream
// consumers read outputs at rows [p, p+n) only; with full causal attention
// those rows see exactly {all demos} + {input j <= i}, which is why this is
// a special case of prefix attention (tested, not assumed).
inline Tensor icl_prepend(const Tensor& demos, const Tensor& x) {
  if (!x.valid()) throw std::invalid_argument("icl_prepend: empty input");
  if (!demos.valid() || demos.rows() == 0) return x;
  return concat_rows(demos, x);
}

// ---------------------------------------------------------------------------
// Ladder rung 1: prefix attention and its decomposition
// ---------------------------------------------------------------------------

// Prefix attention: one flat softmax per query over p prefix positions
// (always visible) plus the causal input window. p = 0 reduces exactly to
// base attention. Differentiable through X and S.
inline Tensor pt_forward(const Tensor& x, const HeadWeights& hw, const PrefixParams& prefix,
                         const AttentionConfig& cfg, Tensor* probs_out = nullptr) {
  detail::check_head_shapes(x, hw, cfg, "pt_forward");
  std::size_t p = prefix.p();
  if (p > 0 && prefix.s.cols() != cfg.d_model)
    throw std::invalid_argument("pt_forward: prefix width does not match d_model");
  std::size_t n = x.rows();
  Tensor q = matmul(x, hw.w_q);
  Tensor k = matmul(x, hw.w_k);
  Tensor v = matmul(x, hw.w_v);
  if (p > 0) {
    k = concat_rows(matmul(prefix.s, hw.w_k), k);
    v = concat_rows(matmul(prefix.s, hw.w_v), v);
  }
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
  Tensor probs = softmax_rows(logits, cfg.causal ? prefix_causal_mask(n, p) : Tensor());
  if (probs_out) *probs_out = probs.detached_copy();
  return matmul(probs, v);
}

struct PtDecomposition {
  Tensor output;  // [n x d_v], reassembled (1-alpha_i) o_i + sum alpha_ij v'_j
  Tensor base;    // [n x d_v], input-only attention o_i
  Tensor alpha;   // [n x p], per-query prefix weights alpha_ij
};

// The convex-decomposition route, written as plain per-query loops directly
// from the decomposition formula (independent of pt_forward's flat-softmax
// route): o^pt_i = (1 - alpha_i) o_i + sum_j alpha_ij v'_j with
// alpha_ij = sim(q_i, W_K s_j) / (input mass + prefix mass). Tape-free.
inline PtDecomposition pt_decomposed(const Tensor& x, const HeadWeights& hw,
                                     const PrefixParams& prefix, const AttentionConfig& cfg) {
  detail::check_head_shapes(x, hw, cfg, "pt_decomposed");
  TapePause pause;
  std::size_t p = prefix.p();
  std::size_t n = x.rows(), dv = cfg.d_v;

  Tensor q = matmul(x, hw.w_q);
  Tensor k = matmul(x, hw.w_k);
  Tensor v = matmul(x, hw.w_v);
  Tensor kp = p > 0 ? matmul(prefix.s, hw.w_k) : Tensor::zeros(0, cfg.d_k);
  Tensor vp = p > 0 ? matmul(prefix.s, hw.w_v) : Tensor::zeros(0, dv);

  PtDecomposition out;
  out.output = Tensor::zeros(n, dv);
  out.base = Tensor::zeros(n, dv);
  out.alpha = Tensor::zeros(n, p);

  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t limit = cfg.causal ? i + 1 : n;
    // a shared max exponent keeps every ratio stable; it cancels from all of
    // alpha, the base weights, and the reassembly
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> din(limit), dpre(p);
    for (std::size_t j = 0; j < limit; ++j) {
      double dot = 0.0;
      for (std::size_t b = 0; b < cfg.d_k; ++b) dot += q.at(i, b) * k.at(j, b);
      din[j] = dot * inv_sqrt;
      mx = std::max(mx, din[j]);
    }
    for (std::size_t j = 0; j < p; ++j) {
      double dot = 0.0;
      for (std::size_t b = 0; b < cfg.d_k; ++b) dot += q.at(i, b) * kp.at(j, b);
      dpre[j] = dot * inv_sqrt;
      mx = std::max(mx, dpre[j]);
    }
    double mass_in = 0.0, mass_pre = 0.0;
    for (std::size_t j = 0; j < limit; ++j) mass_in += std::exp(din[j] - mx);
    for (std::size_t j = 0; j < p; ++j) mass_pre += std::exp(dpre[j] - mx);
    double total = mass_in + mass_pre;

    // base attention o_i (normalized over inputs only)
    double alpha_i = 0.0;
    for (std::size_t b = 0; b < dv; ++b) {
      double acc = 0.0;
      for (std::size_t j = 0; j < limit; ++j) acc += std::exp(din[j] - mx) * v.at(j, b);
      out.base.set(i, b, acc / mass_in);
    }
    for (std::size_t j = 0; j < p; ++j) {
      double aij = std::exp(dpre[j] - mx) / total;
      out.alpha.set(i, j, aij);
      alpha_i += aij;
    }
    for (std::size_t b = 0; b < dv; ++b) {
      double acc = (1.0 - alpha_i) * out.base.at(i, b);
      for (std::size_t j = 0; j < p; ++j) acc += out.alpha.at(i, j) * vp.at(j, b);
      out.output.set(i, b, acc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ladder rung 2: lambda split
// ---------------------------------------------------------------------------

namespace detail {
inline void check_lambda(double lambda, const char* op) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument(std::string(op) + ": lambda must lie in [0, 1]");
}
}  // namespace detail

// Prefix-only branch: a softmax over just the p prefix positions (all
// visible to every query).
inline Tensor prefix_branch_softmax(const Tensor& x, const HeadWeights& hw,
                                    const PrefixParams& prefix, const AttentionConfig& cfg) {
  detail::check_head_shapes(x, hw, cfg, "prefix_branch_softmax");
  if (prefix.p() == 0)
    throw std::invalid_argument("prefix_branch_softmax: empty prefix has no normalizable branch");
  Tensor q = matmul(x, hw.w_q);
  Tensor kp = matmul(prefix.s, hw.w_k);
  Tensor vp = matmul(prefix.s, hw.w_v);
  Tensor logits = scale(matmul(q, transpose(kp)), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
  return matmul(softmax_rows(logits), vp);
}

// Fixed convex mix of the two separately normalized branches:
// lambda * base attention + (1 - lambda) * prefix-only attention.
inline Tensor lambda_split_forward(const Tensor& x, const HeadWeights& hw,
                                   const PrefixParams& prefix, double lambda,
                                   const AttentionConfig& cfg) {
  detail::check_lambda(lambda, "lambda_split_forward");
  Tensor base = attn_matrix_form(x, hw, cfg);
  if (lambda == 1.0) return base;
  if (prefix.p() == 0)
    throw std::invalid_argument("lambda_split_forward: p = 0 requires lambda = 1");
  Tensor pre = prefix_branch_softmax(x, hw, prefix, cfg);
  return add(scale(base, lambda), scale(pre, 1.0 - lambda));
}

// ---------------------------------------------------------------------------
// Ladder rungs 3-4: kernelized prefix branch and the trainable memory form
// ---------------------------------------------------------------------------

// Summed prefix statistics: M = sum_j phi(W_K s_j) (W_V s_j)^T [d_phi x d_v]
// and N = sum_j phi(W_K s_j) [d_phi x 1]. p = 0 gives zero matrices.
inline std::pair<Tensor, Tensor> init_mn_from_prefix(const PrefixParams& prefix,
                                                     const HeadWeights& hw,
                                                     const FeatureMapSpec& phi) {
  std::size_t p = prefix.p();
  std::size_t dk = hw.w_k.cols();
  phi.validate(dk);
  std::size_t dphi = phi.d_phi(dk);
  if (p == 0) return {Tensor::zeros(dphi, hw.w_v.cols()), Tensor::zeros(dphi, 1)};
  Tensor phis = feature_map_rows(phi, matmul(prefix.s, hw.w_k));  // [p x d_phi]
  Tensor vp = matmul(prefix.s, hw.w_v);                           // [p x d_v]
  Tensor m = matmul(transpose(phis), vp);
  Tensor n = matmul(transpose(phis), Tensor::ones(p, 1));
  return {m, n};
}

// Normalized memory read: rows phi(q_i)^T M / phi(q_i)^T N. The divide op's
// guard surfaces near-zero denominators as errors.
inline Tensor memory_branch(const Tensor& q, const Tensor& m, const Tensor& n,
                            const FeatureMapSpec& phi) {
  Tensor phiq = feature_map_rows(phi, q);  // [n x d_phi]
  if (m.rows() != phiq.cols())
    throw std::invalid_argument("memory_branch: M row count " + std::to_string(m.rows()) +
                                " does not match d_phi " + std::to_string(phiq.cols()));
  if (n.rows() != phiq.cols() || n.cols() != 1)
    throw std::invalid_argument("memory_branch: N must be [d_phi x 1]");
  Tensor num = matmul(phiq, m);  // [n x d_v]
  Tensor den = matmul(phiq, n);  // [n x 1]
  // per-row normalization via the transpose trick (row-broadcast divide)
  return transpose(divide(transpose(num), transpose(den)));
}

// Trainable-memory form: lambda * base + (1 - lambda) * phi(q)M / phi(q)N.
inline Tensor mn_forward(const Tensor& x, const HeadWeights& hw, const Tensor& m, const Tensor& n,
                         double lambda, const FeatureMapSpec& phi, const AttentionConfig& cfg) {
  detail::check_lambda(lambda, "mn_forward");
  detail::check_head_shapes(x, hw, cfg, "mn_forward");
  Tensor base = attn_matrix_form(x, hw, cfg);
  if (lambda == 1.0) return base;
  Tensor q = matmul(x, hw.w_q);
  Tensor pre = memory_branch(q, m, n, phi);
  return add(scale(base, lambda), scale(pre, 1.0 - lambda));
}

// Kernel approximation of the prefix branch. Implemented literally as
// init_mn_from_prefix + mn_forward so the initialization-equivalence
// property is the same arithmetic, not merely close.
inline Tensor kernel_prefix_forward(const Tensor& x, const HeadWeights& hw,
                                    const PrefixParams& prefix, double lambda,
                                    const FeatureMapSpec& phi, const AttentionConfig& cfg) {
  detail::check_lambda(lambda, "kernel_prefix_forward");
  auto [m, n] = init_mn_from_prefix(prefix, hw, phi);
  return mn_forward(x, hw, m, n, lambda, phi, cfg);
}

// ---------------------------------------------------------------------------
// Ladder rung 5: the external-bias form
// ---------------------------------------------------------------------------

// Final form: base attention + phi(q_i)^T M. No normalizer (the N term lost
// its meaning once M became trainable) and no lambda (absorbed into M).
inline Tensor ptplus_forward(const Tensor& x, const HeadWeights& hw, const Tensor& m,
                             const FeatureMapSpec& phi, const AttentionConfig& cfg,
                             Tensor* probs_out = nullptr) {
  detail::check_head_shapes(x, hw, cfg, "ptplus_forward");
  Tensor base = attn_matrix_form(x, hw, cfg, probs_out);
  Tensor phiq = feature_map_rows(phi, matmul(x, hw.w_q));
  if (m.rows() != phiq.cols())
    throw std::invalid_argument("ptplus_forward: M row count " + std::to_string(m.rows()) +
                                " does not match phi output width " +
                                std::to_string(phiq.cols()));
  return add(base, matmul(phiq, m));
}

// ---------------------------------------------------------------------------
// Ladder rung 6: the in-head hybrid
// ---------------------------------------------------------------------------

enum class SimKind { Exp, Linearized };

// In-head hybrid: o_i = (sum_{j<=i} sim(q_i,k_j) v_j + phi(q_i)^T M) /
// (sum_{j<=i} sim(q_i,k_j) + phi(q_i)^T N). SimKind::Exp uses the softmax
// similarity exp(q·k/sqrt(d_k)) evaluated directly (desk-scale logits; the
// finite check guards overflow); SimKind::Linearized replaces it with
// phi(q)^T phi(k), the fully linearized rung used by the ladder check.
// Causality is enforced with an exact 0/1 lower-triangular factor so no
// -inf sentinel passes through exp.
inline Tensor inhead_hybrid_forward(const Tensor& x, const HeadWeights& hw, const Tensor& m,
                                    const Tensor& n, const FeatureMapSpec& phi,
                                    const AttentionConfig& cfg, SimKind sim = SimKind::Exp,
                                    Tensor* probs_out = nullptr) {
  detail::check_head_shapes(x, hw, cfg, "inhead_hybrid_forward");
  std::size_t nrows = x.rows();
  Tensor q = matmul(x, hw.w_q);
  Tensor k = matmul(x, hw.w_k);
  Tensor v = matmul(x, hw.w_v);

  Tensor sims;
  if (sim == SimKind::Exp) {
    Tensor dots = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
    sims = vexp(dots);
  } else {
    sims = matmul(feature_map_rows(phi, q), transpose(feature_map_rows(phi, k)));
  }
  if (cfg.causal) {
    Tensor tri = Tensor::zeros(nrows, nrows);
    for (std::size_t i = 0; i < nrows; ++i)
      for (std::size_t j = 0; j <= i; ++j) tri.set(i, j, 1.0);
    sims = mul(sims, tri);
  }

  Tensor phiq = feature_map_rows(phi, q);
  if (m.rows() != phiq.cols() || n.rows() != phiq.cols() || n.cols() != 1)
    throw std::invalid_argument("inhead_hybrid_forward: M/N shapes do not match phi width");
  Tensor num = add(matmul(sims, v), matmul(phiq, m));                 // [n x d_v]
  Tensor den = add(matmul(sims, Tensor::ones(nrows, 1)), matmul(phiq, n));  // [n x 1]
  if (probs_out) {
    // input-token mixture weights; rows sum to <= 1 because the memory
    // term claims the remaining denominator mass
    TapePause pause;
    *probs_out =
        transpose(divide(transpose(sims.detached_copy()), transpose(den.detached_copy())));
  }
  return transpose(divide(transpose(num), transpose(den)));
}

// ---------------------------------------------------------------------------
// LoRA baseline
// ---------------------------------------------------------------------------

// Returns a weight set with W replaced by W + A·B for each targeted matrix.
// The returned tensors are tape nodes when A/B require gradients; the
// original weights are never modified.
inline AttentionWeights lora_apply(const AttentionWeights& w, const LoraParams& params,
                                   const AttentionConfig& cfg) {
  w.check(cfg);
  auto expect = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b, std::size_t count,
                   const char* which) {
    if (a.size() != count || b.size() != count)
      throw std::invalid_argument(std::string("lora_apply: factor count mismatch for ") + which);
  };
  AttentionWeights out = w;
  if (params.targets & kLoraQ) {
    expect(params.a_q, params.b_q, cfg.n_heads, "W_Q");
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      out.w_q[h] = add(w.w_q[h], matmul(params.a_q[h], params.b_q[h]));
  }
  if (params.targets & kLoraK) {
    expect(params.a_k, params.b_k, cfg.n_kv_heads, "W_K");
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h)
      out.w_k[h] = add(w.w_k[h], matmul(params.a_k[h], params.b_k[h]));
  }
  if (params.targets & kLoraV) {
    expect(params.a_v, params.b_v, cfg.n_kv_heads, "W_V");
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h)
      out.w_v[h] = add(w.w_v[h], matmul(params.a_v[h], params.b_v[h]));
  }
  return out;
}

}  // namespace ptlab
