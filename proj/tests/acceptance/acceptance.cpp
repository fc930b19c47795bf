// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Release gate: twelve independent checks over the built artifact, one
// pass/fail line each. Tolerances are pinned here, not configurable, so a
// report cannot be gamed green from the command line. Exit 0 only if every
// check passes. Invoke with `--cli <path-to-ptlab-binary>` (the determinism
// check spawns the real executable).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ptlab/attention.hpp"
#include "ptlab/checkpoint.hpp"
#include "ptlab/diagnostics.hpp"
#include "ptlab/experiment.hpp"
#include "ptlab/model.hpp"
#include "ptlab/peft.hpp"
#include "ptlab/rng.hpp"
#include "ptlab/tasks.hpp"
#include "ptlab/tensor.hpp"
#include "ptlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace ptlab;

namespace {

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void run_criterion(int id, const std::string& title, double budget_s,
                   const std::function<Outcome()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = fn();
  } catch (const std::exception& e) {
    out.pass = false;
    out.detail = std::string("exception: ") + e.what();
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool in_budget = budget_s <= 0.0 || secs < budget_s;
  if (!in_budget) {
    out.pass = false;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "exceeded %.0fs budget", budget_s);
    out.detail += out.detail.empty() ? buf : std::string("; ") + buf;
  }
  if (!out.pass) ++g_failures;
  std::printf("[%s] %02d %s (%s) [%.2fs]\n", out.pass ? "PASS" : "FAIL", id, title.c_str(),
              out.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared instance builders
// ---------------------------------------------------------------------------

struct HeadInstance {
  AttentionConfig cfg;
  HeadWeights hw;
  Tensor x;
};

HeadInstance random_head_instance(SplitRng& rng, std::size_t max_n, std::size_t max_dk) {
  HeadInstance ins;
  ins.cfg.d_model = 2 + rng.below(7);
  ins.cfg.d_k = 1 + rng.below(max_dk);
  ins.cfg.d_v = 1 + rng.below(6);
  ins.cfg.n_heads = 1;
  ins.cfg.n_kv_heads = 1;
  ins.cfg.causal = rng.below(2) == 0;
  std::size_t n = 1 + rng.below(max_n);
  ins.x = random_tensor(n, ins.cfg.d_model, rng, 1.0);
  ins.hw.w_q = random_tensor(ins.cfg.d_model, ins.cfg.d_k, rng, 0.6);
  ins.hw.w_k = random_tensor(ins.cfg.d_model, ins.cfg.d_k, rng, 0.6);
  ins.hw.w_v = random_tensor(ins.cfg.d_model, ins.cfg.d_v, rng, 0.6);
  return ins;
}

// Central finite differences of a scalar function at t0.
Tensor central_diff(const std::function<double(const Tensor&)>& f, const Tensor& t0, double h) {
  Tensor g = Tensor::zeros(t0.rows(), t0.cols());
  for (std::size_t i = 0; i < t0.rows(); ++i) {
    for (std::size_t j = 0; j < t0.cols(); ++j) {
      Tensor hi = t0.detached_copy();
      Tensor lo = t0.detached_copy();
      hi.set(i, j, t0.at(i, j) + h);
      lo.set(i, j, t0.at(i, j) - h);
      g.set(i, j, (f(hi) - f(lo)) / (2.0 * h));
    }
  }
  return g;
}

// Guarded relative error: |a-b| / max(1, |a|, |b|).
double rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double av = a.values()[i], bv = b.values()[i];
    worst = std::max(worst, std::abs(av - bv) / std::max({1.0, std::abs(av), std::abs(bv)}));
  }
  return worst;
}

// One-sided Jacobi singular values of a [m x n] matrix (m >= n), descending.
// Independent oracle: rotates column pairs until all are orthogonal; the
// singular values are the surviving column norms.
std::vector<double> jacobi_singular_values(std::vector<std::vector<double>> a) {
  const std::size_t m = a.size();
  const std::size_t n = m ? a[0].size() : 0;
  for (int sweep = 0; sweep < 300; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          app += a[i][p] * a[i][p];
          aqq += a[i][q] * a[i][q];
          apq += a[i][p] * a[i][q];
        }
        if (std::abs(apq) <= 1e-15 * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        double tau = (aqq - app) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t), s = t * c;
        for (std::size_t i = 0; i < m; ++i) {
          double vp = a[i][p], vq = a[i][q];
          a[i][p] = c * vp - s * vq;
          a[i][q] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) sq += a[i][j] * a[i][j];
    sv[j] = std::sqrt(sq);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

// Final-layer attention outputs of the first `cap` probe examples, stacked.
Tensor probe_rows(const ModelState& st, const Dataset& ds, std::size_t cap) {
  std::vector<Tensor> chunks;
  std::size_t take = std::min(cap, ds.test.size());
  std::size_t rows = 0;
  for (std::size_t i = 0; i < take; ++i) {
    ForwardTrace tr;
    forward(st, ds.test[i].tokens, &tr);
    chunks.push_back(tr.attn_outputs.back());
    rows += chunks.back().rows();
  }
  Tensor out = Tensor::zeros(rows, st.cfg.d_model);
  std::size_t r = 0;
  for (const Tensor& c : chunks)
    for (std::size_t i = 0; i < c.rows(); ++i, ++r)
      for (std::size_t j = 0; j < c.cols(); ++j) out.set(r, j, c.at(i, j));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Shared run state (few-shot artifacts feed two checks)
// ---------------------------------------------------------------------------

std::string g_cli;
fs::path g_config_dir;
fs::path g_out_root;

ExperimentConfig g_fewshot_cfg;
ExperimentResult g_fewshot_res;
fs::path g_fewshot_dir;
bool g_fewshot_ok = false;

// ---------------------------------------------------------------------------
// 1. token-stream attention vs matrix softmax attention
// ---------------------------------------------------------------------------

Outcome criterion_token_vs_matrix() {
  TapePause pause;
  const double tol = 1e-10;
  double worst = 0.0;
  SplitRng rng(9001, "acc-forms");
  for (int i = 0; i < 100; ++i) {
    HeadInstance ins = random_head_instance(rng, 16, 8);
    worst = std::max(worst,
                     max_abs_diff(attn_matrix_form(ins.x, ins.hw, ins.cfg),
                                  attn_token_form(ins.x, ins.hw, ins.cfg)));
  }
  return {worst <= tol, "100 instances, max dev " + fmt(worst) + ", tol " + fmt(tol)};
}

// ---------------------------------------------------------------------------
// 2. prefix attention vs convex decomposition + mixture-mass monotonicity
// ---------------------------------------------------------------------------

Outcome criterion_decomposition() {
  TapePause pause;
  const double tol = 1e-10;
  double worst = 0.0;
  std::size_t grow_checked = 0, shrink_checked = 0;
  SplitRng rng(9002, "acc-decomp");
  auto row_mass = [](const Tensor& alpha, std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < alpha.cols(); ++j) s += alpha.at(i, j);
    return s;
  };
  for (int i = 0; i < 100; ++i) {
    HeadInstance ins = random_head_instance(rng, 10, 8);
    std::size_t p = rng.below(9);  // 0..8
    PrefixParams prefix;
    if (p > 0) prefix.s = random_tensor(p, ins.cfg.d_model, rng, 0.8);

    Tensor flat = pt_forward(ins.x, ins.hw, prefix, ins.cfg);
    PtDecomposition dec = pt_decomposed(ins.x, ins.hw, prefix, ins.cfg);
    worst = std::max(worst, max_abs_diff(flat, dec.output));

    // appending a prefix vector strictly raises every query's prefix mass
    PrefixParams grown;
    Tensor extra = random_tensor(1, ins.cfg.d_model, rng, 0.8);
    grown.s = p > 0 ? concat_rows(prefix.s, extra) : extra;
    PtDecomposition dec_grown = pt_decomposed(ins.x, ins.hw, grown, ins.cfg);
    for (std::size_t r = 0; r < ins.x.rows(); ++r) {
      if (!(row_mass(dec_grown.alpha, r) > row_mass(dec.alpha, r)))
        return {false, "prefix append did not raise mixture mass (instance " +
                           std::to_string(i) + ", row " + std::to_string(r) + ")"};
      ++grow_checked;
    }

    // inserting an extra input token into the query's window strictly lowers
    // its prefix mass (needs p >= 1 so there is mass to lose)
    if (p >= 1) {
      std::size_t n = ins.x.rows();
      Tensor x2 = Tensor::zeros(n + 1, ins.cfg.d_model);
      for (std::size_t r = 0; r + 1 < n; ++r)
        for (std::size_t c = 0; c < ins.cfg.d_model; ++c) x2.set(r, c, ins.x.at(r, c));
      Tensor mid = random_tensor(1, ins.cfg.d_model, rng, 0.8);
      for (std::size_t c = 0; c < ins.cfg.d_model; ++c) {
        x2.set(n - 1, c, mid.at(0, c));
        x2.set(n, c, ins.x.at(n - 1, c));
      }
      PtDecomposition dec_wide = pt_decomposed(x2, ins.hw, prefix, ins.cfg);
      if (!(row_mass(dec_wide.alpha, n) < row_mass(dec.alpha, n - 1)))
        return {false, "in-window input append did not lower mixture mass (instance " +
                           std::to_string(i) + ")"};
      ++shrink_checked;
    }
  }
  bool pass = worst <= tol && shrink_checked >= 80;
  return {pass, "100 instances, max dev " + fmt(worst) + ", tol " + fmt(tol) + "; mass up " +
                    std::to_string(grow_checked) + " rows, down " +
                    std::to_string(shrink_checked) + " instances"};
}

// ---------------------------------------------------------------------------
// 3. kernelized prefix vs initialized memory form; linearized hybrid vs flat
// ---------------------------------------------------------------------------

// Flat linearized reference: one normalization over window plus prefix with
// feature-dot similarities, computed with plain loops straight from rows.
Tensor flat_linearized(const Tensor& x, const HeadWeights& hw, const PrefixParams& prefix,
                       const FeatureMapSpec& phi, const AttentionConfig& cfg) {
  Tensor q = matmul(x, hw.w_q);
  Tensor k = matmul(x, hw.w_k);
  Tensor v = matmul(x, hw.w_v);
  Tensor kp = matmul(prefix.s, hw.w_k);
  Tensor vp = matmul(prefix.s, hw.w_v);
  Tensor fq = feature_map_rows(phi, q);
  Tensor fk = feature_map_rows(phi, k);
  Tensor fp = feature_map_rows(phi, kp);
  std::size_t n = x.rows(), dv = cfg.d_v, dphi = fq.cols(), p = prefix.p();
  Tensor out = Tensor::zeros(n, dv);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t limit = cfg.causal ? i + 1 : n;
    std::vector<double> num(dv, 0.0);
    double den = 0.0;
    auto dot = [&](const Tensor& rows, std::size_t r) {
      double s = 0.0;
      for (std::size_t b = 0; b < dphi; ++b) s += fq.at(i, b) * rows.at(r, b);
      return s;
    };
    for (std::size_t j = 0; j < limit; ++j) {
      double w = dot(fk, j);
      den += w;
      for (std::size_t b = 0; b < dv; ++b) num[b] += w * v.at(j, b);
    }
    for (std::size_t l = 0; l < p; ++l) {
      double w = dot(fp, l);
      den += w;
      for (std::size_t b = 0; b < dv; ++b) num[b] += w * vp.at(l, b);
    }
    for (std::size_t b = 0; b < dv; ++b) out.set(i, b, num[b] / den);
  }
  return out;
}

Outcome criterion_memory_forms() {
  TapePause pause;
  const double tol_mem = 1e-12, tol_hybrid = 1e-10;
  double worst_mem = 0.0, worst_hybrid = 0.0;
  SplitRng rng(9003, "acc-memory");
  FeatureMapSpec phi = FeatureMapSpec::elu_plus_one();  // positive features keep
                                                        // the denominators alive
  for (int i = 0; i < 100; ++i) {
    HeadInstance ins = random_head_instance(rng, 10, 6);
    std::size_t p = 1 + rng.below(6);
    PrefixParams prefix;
    prefix.s = random_tensor(p, ins.cfg.d_model, rng, 0.8);
    double lambda = (i % 3 == 0) ? 0.0 : (i % 3 == 1) ? 1.0 : rng.uniform();

    Tensor a = kernel_prefix_forward(ins.x, ins.hw, prefix, lambda, phi, ins.cfg);
    auto [m, n] = init_mn_from_prefix(prefix, ins.hw, phi);
    Tensor b = mn_forward(ins.x, ins.hw, m, n, lambda, phi, ins.cfg);
    worst_mem = std::max(worst_mem, max_abs_diff(a, b));

    Tensor hyb = inhead_hybrid_forward(ins.x, ins.hw, m, n, phi, ins.cfg, SimKind::Linearized);
    worst_hybrid =
        std::max(worst_hybrid, max_abs_diff(hyb, flat_linearized(ins.x, ins.hw, prefix, phi,
                                                                 ins.cfg)));
  }
  bool pass = worst_mem <= tol_mem && worst_hybrid <= tol_hybrid;
  return {pass, "memory dev " + fmt(worst_mem) + " (tol " + fmt(tol_mem) + "), hybrid dev " +
                    fmt(worst_hybrid) + " (tol " + fmt(tol_hybrid) + ")"};
}

// ---------------------------------------------------------------------------
// 4. neutral initializations reproduce base attention on MHA and GQA
// ---------------------------------------------------------------------------

Outcome criterion_degeneracy() {
  TapePause pause;
  const double tol = 1e-12;
  double worst = 0.0;
  SplitRng rng(9004, "acc-degeneracy");
  FeatureMapSpec phi = FeatureMapSpec::elu_plus_one();
  for (std::size_t kv : {std::size_t{2}, std::size_t{1}}) {
    for (int i = 0; i < 10; ++i) {
      AttentionConfig cfg;
      cfg.d_model = 6;
      cfg.d_k = 3;
      cfg.d_v = 3;
      cfg.n_heads = 2;
      cfg.n_kv_heads = kv;
      cfg.causal = i % 2 == 0;
      AttentionWeights w = AttentionWeights::init(cfg, rng);
      Tensor x = random_tensor(5, cfg.d_model, rng, 1.0);
      Tensor base = multi_head_forward(x, w, cfg);

      HeadForward pt0 = [&](std::size_t h, const HeadWeights& hw) {
        (void)h;
        return pt_forward(x, hw, PrefixParams{}, cfg);
      };
      worst = std::max(worst, max_abs_diff(multi_head_forward(x, w, cfg, pt0), base));

      Tensor m0 = Tensor::zeros(phi.d_phi(cfg.d_k), cfg.d_v);
      HeadForward bias0 = [&](std::size_t h, const HeadWeights& hw) {
        (void)h;
        return ptplus_forward(x, hw, m0, phi, cfg);
      };
      worst = std::max(worst, max_abs_diff(multi_head_forward(x, w, cfg, bias0), base));

      LoraParams lora = LoraParams::init(cfg, 2, kLoraQ | kLoraV, rng);
      worst = std::max(worst, max_abs_diff(multi_head_forward(x, lora_apply(w, lora, cfg), cfg),
                                           base));
    }
  }
  return {worst <= tol, "20 instances (mha+gqa) x 3 methods, max dev " + fmt(worst) +
                            ", tol " + fmt(tol)};
}

// ---------------------------------------------------------------------------
// 5. autodiff vs central finite differences, every trainable of every method
// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  const double tol = 1e-4, h = 1e-5;
  double worst = 0.0;
  std::string worst_at = "none";
  auto note = [&](const std::string& name, double r) {
    if (r > worst) {
      worst = r;
      worst_at = name;
    }
  };

  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SplitRng rng(seed, "acc-grad");
    AttentionConfig cfg;
    cfg.d_model = 4;
    cfg.d_k = 3;
    cfg.d_v = 3;
    cfg.n_heads = 1;
    cfg.n_kv_heads = 1;
    cfg.causal = true;
    HeadWeights hw;
    hw.w_q = random_tensor(4, 3, rng, 0.6);
    hw.w_k = random_tensor(4, 3, rng, 0.6);
    hw.w_v = random_tensor(4, 3, rng, 0.6);
    Tensor x = random_tensor(4, 4, rng, 1.0);
    Tensor cot = random_tensor(4, 3, rng, 1.0);
    auto scalarize = [&](const Tensor& out) { return sum_all(mul(out, cot)); };

    // prefix matrix S
    {
      PrefixParams prefix = PrefixParams::init(2, 4, rng, 0.5);
      Tensor s0 = prefix.s.detached_copy();
      prefix.s.set_requires_grad(true);
      Tape tape;
      tape.backward(scalarize(pt_forward(x, hw, prefix, cfg)));
      Tensor a = Tensor::from(2, 4, prefix.s.grad());
      Tensor fd = central_diff(
          [&](const Tensor& sv) {
            TapePause pause;
            PrefixParams probe;
            probe.s = sv.detached_copy();
            return scalarize(pt_forward(x, hw, probe, cfg)).item();
          },
          s0, h);
      note("prefix S", rel_err(a, fd));
    }

    // external memory M
    FeatureMapSpec elu = FeatureMapSpec::elu_plus_one();
    {
      Tensor m = random_tensor(3, 3, rng, 0.3);
      Tensor m0 = m.detached_copy();
      m.set_requires_grad(true);
      Tape tape;
      tape.backward(scalarize(ptplus_forward(x, hw, m, elu, cfg)));
      Tensor a = Tensor::from(3, 3, m.grad());
      Tensor fd = central_diff(
          [&](const Tensor& mv) {
            TapePause pause;
            return scalarize(ptplus_forward(x, hw, mv.detached_copy(), elu, cfg)).item();
          },
          m0, h);
      note("memory M", rel_err(a, fd));
    }

    // hybrid M and N (positive N keeps the in-head denominator away from 0)
    {
      Tensor m = random_tensor(3, 3, rng, 0.3);
      Tensor n = Tensor::zeros(3, 1);
      for (std::size_t i = 0; i < 3; ++i) n.set(i, 0, 0.5 + rng.uniform());
      Tensor m0 = m.detached_copy(), n0 = n.detached_copy();
      m.set_requires_grad(true);
      n.set_requires_grad(true);
      Tape tape;
      tape.backward(scalarize(inhead_hybrid_forward(x, hw, m, n, elu, cfg)));
      Tensor am = Tensor::from(3, 3, m.grad());
      Tensor an = Tensor::from(3, 1, n.grad());
      Tensor fdm = central_diff(
          [&](const Tensor& mv) {
            TapePause pause;
            return scalarize(inhead_hybrid_forward(x, hw, mv.detached_copy(), n0, elu, cfg))
                .item();
          },
          m0, h);
      Tensor fdn = central_diff(
          [&](const Tensor& nv) {
            TapePause pause;
            return scalarize(inhead_hybrid_forward(x, hw, m0, nv.detached_copy(), elu, cfg))
                .item();
          },
          n0, h);
      note("hybrid M", rel_err(am, fdm));
      note("hybrid N", rel_err(an, fdn));
    }

    // trainable relu-affine feature map W_phi, b_phi. The map is piecewise
    // linear; a pre-activation inside the finite-difference step of zero
    // would invalidate the central-difference oracle (not the gradient), so
    // instances are redrawn until every pre-activation clears 100*h.
    {
      FeatureMapSpec relu;
      Tensor q = matmul(x, hw.w_q);
      bool clear = false;
      for (int attempt = 0; attempt < 50 && !clear; ++attempt) {
        relu = FeatureMapSpec::relu_affine(5, 3, rng);
        clear = true;
        Tensor pre = add(matmul(q, transpose(relu.w_phi)),
                         matmul(Tensor::ones(q.rows(), 1), relu.b_phi));
        for (double v : pre.values())
          if (std::abs(v) < 100.0 * h) clear = false;
      }
      if (!clear) return {false, "could not draw a kink-free relu-affine instance"};
      relu.trainable = true;
      Tensor m = random_tensor(5, 3, rng, 0.3);
      Tensor w0 = relu.w_phi.detached_copy(), b0 = relu.b_phi.detached_copy();
      relu.w_phi.set_requires_grad(true);
      relu.b_phi.set_requires_grad(true);
      Tape tape;
      tape.backward(scalarize(ptplus_forward(x, hw, m, relu, cfg)));
      Tensor aw = Tensor::from(5, 3, relu.w_phi.grad());
      Tensor ab = Tensor::from(1, 5, relu.b_phi.grad());
      Tensor fdw = central_diff(
          [&](const Tensor& wv) {
            TapePause pause;
            FeatureMapSpec probe = relu;
            probe.w_phi = wv.detached_copy();
            probe.b_phi = b0;
            return scalarize(ptplus_forward(x, hw, m, probe, cfg)).item();
          },
          w0, h);
      Tensor fdb = central_diff(
          [&](const Tensor& bv) {
            TapePause pause;
            FeatureMapSpec probe = relu;
            probe.w_phi = w0;
            probe.b_phi = bv.detached_copy();
            return scalarize(ptplus_forward(x, hw, m, probe, cfg)).item();
          },
          b0, h);
      note("feature W_phi", rel_err(aw, fdw));
      note("feature b_phi", rel_err(ab, fdb));
    }

    // low-rank factors A and B (query and value targets)
    {
      AttentionWeights w;
      w.w_q.push_back(hw.w_q);
      w.w_k.push_back(hw.w_k);
      w.w_v.push_back(hw.w_v);
      w.w_o = random_tensor(3, 4, rng, 0.6);
      Tensor cotw = random_tensor(4, 4, rng, 1.0);
      LoraParams lp = LoraParams::init(cfg, 2, kLoraQ | kLoraV, rng);
      for (Tensor& b : lp.b_q) b = random_tensor(2, 3, rng, 0.3);
      for (Tensor& b : lp.b_v) b = random_tensor(2, 3, rng, 0.3);
      Tensor a0 = lp.a_q[0].detached_copy(), b0 = lp.b_q[0].detached_copy();
      Tensor av0 = lp.a_v[0].detached_copy(), bv0 = lp.b_v[0].detached_copy();
      lp.a_q[0].set_requires_grad(true);
      lp.b_q[0].set_requires_grad(true);
      lp.a_v[0].set_requires_grad(true);
      lp.b_v[0].set_requires_grad(true);
      Tape tape;
      tape.backward(sum_all(mul(multi_head_forward(x, lora_apply(w, lp, cfg), cfg), cotw)));
      // capture analytic gradients before the probes below overwrite the
      // factor tensors (the restore path drops gradient buffers)
      Tensor ga_q = Tensor::from(4, 2, lp.a_q[0].grad());
      Tensor gb_q = Tensor::from(2, 3, lp.b_q[0].grad());
      Tensor ga_v = Tensor::from(4, 2, lp.a_v[0].grad());
      Tensor gb_v = Tensor::from(2, 3, lp.b_v[0].grad());
      auto fd_for = [&](const Tensor& at, Tensor* slot) {
        return central_diff(
            [&](const Tensor& v) {
              TapePause pause;
              Tensor saved = slot->detached_copy();
              *slot = v.detached_copy();
              double out = sum_all(mul(multi_head_forward(x, lora_apply(w, lp, cfg), cfg), cotw))
                               .item();
              *slot = saved;
              return out;
            },
            at, h);
      };
      note("lora A_q", rel_err(ga_q, fd_for(a0, &lp.a_q[0])));
      note("lora B_q", rel_err(gb_q, fd_for(b0, &lp.b_q[0])));
      note("lora A_v", rel_err(ga_v, fd_for(av0, &lp.a_v[0])));
      note("lora B_v", rel_err(gb_v, fd_for(bv0, &lp.b_v[0])));
    }
  }
  return {worst <= tol, "10 seeds x 9 parameter groups, worst rel err " + fmt(worst) + " (" +
                            worst_at + "), tol " + fmt(tol) + " at h=" + fmt(h)};
}

// ---------------------------------------------------------------------------
// 6. frozen base weights bit-exact after 50 fine-tuning steps per method
// ---------------------------------------------------------------------------

Outcome criterion_frozen_base() {
  ModelConfig cfg;
  cfg.vocab = 16;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.ffn_width = 8;
  cfg.max_seq = 24;
  cfg.attn.d_model = 8;
  cfg.attn.d_k = 4;
  cfg.attn.d_v = 4;
  cfg.attn.n_heads = 2;
  cfg.attn.n_kv_heads = 2;
  cfg.seed = 77;
  ModelState base = init_model(cfg);

  TaskSpec task;
  task.name = "frozen-probe";
  task.kind = TaskKind::PatternClassification;
  task.classes = 2;
  task.seq_len = 8;
  task.vocab = 16;
  task.train_per_class = 4;
  task.test_size = 8;
  task.seed = 5;
  Dataset ds = generate(task);
  FewShotRound round = sample_round(ds, 1, 13);

  OptimizerSpec spec;
  spec.lr = 1e-2;
  spec.max_steps = 50;
  spec.batch_size = 2;
  spec.trace_every = 50;

  std::vector<MethodSpec> methods;
  {
    MethodSpec m;
    m.kind = MethodKind::Prefix;
    m.prefix_len = 3;
    methods.push_back(m);
    m = MethodSpec{};
    m.kind = MethodKind::PtPlus;
    m.d_phi = 4;
    methods.push_back(m);
    m = MethodSpec{};
    m.kind = MethodKind::Hybrid;
    m.d_phi = 4;
    methods.push_back(m);
    m = MethodSpec{};
    m.kind = MethodKind::Lora;
    m.rank = 2;
    methods.push_back(m);
  }

  for (const MethodSpec& m : methods) {
    ModelState mounted = mount_method(base, m, 91);
    std::vector<std::vector<double>> before;
    for (const NamedParam& p : named_params(mounted))
      if (!p.peft) before.push_back(p.tensor.values());
    TrainResult tr = train_round(mounted, ds, round, spec);
    std::vector<NamedParam> after = named_params(tr.state);
    std::size_t fi = 0;
    bool peft_moved = false;
    for (const NamedParam& p : after) {
      if (p.peft) {
        for (const NamedParam& q : named_params(mounted))
          if (q.peft && q.name == p.name && q.tensor.values() != p.tensor.values())
            peft_moved = true;
        continue;
      }
      const std::vector<double>& now = p.tensor.values();
      const std::vector<double>& was = before[fi++];
      if (now.size() != was.size() ||
          std::memcmp(now.data(), was.data(), now.size() * sizeof(double)) != 0)
        return {false, to_string(m.kind) + ": frozen parameter '" + p.name + "' changed"};
    }
    if (fi != before.size()) return {false, to_string(m.kind) + ": frozen walk mismatch"};
    if (!peft_moved) return {false, to_string(m.kind) + ": training moved no adapter weights"};
  }
  return {true, "prefix, pt-plus, hybrid, lora: 50 steps each, frozen partition bit-exact"};
}

// ---------------------------------------------------------------------------
// 7. optimizer vs independent reference; decoupled decay contraction
// ---------------------------------------------------------------------------

Outcome criterion_optimizer() {
  const double tol = 1e-12;
  OptimizerSpec spec;
  spec.lr = 0.01;
  spec.beta1 = 0.9;
  spec.beta2 = 0.95;
  spec.eps = 1e-8;
  spec.weight_decay = 0.1;

  SplitRng rng(9007, "acc-opt");
  std::vector<Tensor> params{random_tensor(2, 3, rng, 1.0), random_tensor(3, 1, rng, 1.0)};
  for (Tensor& p : params) p.set_requires_grad(true);
  OptimizerState st = OptimizerState::init(params);

  // independent reference state, plain elementwise loops
  std::vector<std::vector<double>> rt, rm, rv;
  for (const Tensor& p : params) {
    rt.push_back(p.values());
    rm.emplace_back(p.size(), 0.0);
    rv.emplace_back(p.size(), 0.0);
  }

  double worst = 0.0;
  for (int step = 1; step <= 3; ++step) {
    std::vector<Tensor> grads;
    for (const Tensor& p : params)
      grads.push_back(random_tensor(p.rows(), p.cols(), rng, 1.0));
    {
      Tape tape;
      Tensor loss = add(sum_all(mul(params[0], grads[0])), sum_all(mul(params[1], grads[1])));
      tape.backward(loss);
    }
    adamw_step(params, st, spec);
    for (Tensor& p : params) p.zero_grad();

    double bc1 = 1.0 - std::pow(spec.beta1, step);
    double bc2 = 1.0 - std::pow(spec.beta2, step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < rt[i].size(); ++j) {
        double g = grads[i].values()[j];
        rm[i][j] = spec.beta1 * rm[i][j] + (1.0 - spec.beta1) * g;
        rv[i][j] = spec.beta2 * rv[i][j] + (1.0 - spec.beta2) * g * g;
        double m_hat = rm[i][j] / bc1;
        double v_hat = rv[i][j] / bc2;
        rt[i][j] -= spec.lr * (m_hat / (std::sqrt(v_hat) + spec.eps) +
                               spec.weight_decay * rt[i][j]);
        worst = std::max(worst, std::abs(rt[i][j] - params[i].values()[j]));
      }
    }
  }
  if (worst > tol) return {false, "trace deviates from reference by " + fmt(worst)};

  // zero-gradient steps must contract parameters by exactly the decoupled
  // decay factor: no moment or epsilon leakage
  Tensor decay = random_tensor(3, 3, rng, 1.0);
  decay.set_requires_grad(true);
  std::vector<Tensor> dp{decay};
  OptimizerState dst = OptimizerState::init(dp);
  std::vector<double> ref = decay.values();
  for (int step = 0; step < 3; ++step) {
    std::vector<double> prev = dp[0].values();
    {
      Tape tape;
      tape.backward(sum_all(mul(dp[0], Tensor::zeros(3, 3))));
    }
    adamw_step(dp, dst, spec);
    dp[0].zero_grad();
    for (std::size_t j = 0; j < ref.size(); ++j) {
      ref[j] -= spec.lr * (0.0 / (std::sqrt(0.0) + spec.eps) + spec.weight_decay * ref[j]);
      if (ref[j] != dp[0].values()[j])
        return {false, "decay step not bit-exact against reference"};
      if (prev[j] != 0.0 && !(std::abs(dp[0].values()[j]) < std::abs(prev[j])))
        return {false, "decay step failed to contract"};
    }
  }
  return {true, "3-step trace dev " + fmt(worst) + " (tol " + fmt(tol) +
                    "); zero-grad decay bit-exact and contracting"};
}

// ---------------------------------------------------------------------------
// 8. diagnostics vs independent oracles
// ---------------------------------------------------------------------------

Outcome criterion_diagnostics() {
  SplitRng rng(9008, "acc-diag");
  const std::size_t rows = 40, dim = 12;
  Tensor delta = random_tensor(rows, dim, rng, 1.0);

  // full spectrum + reconstruction of the covariance it came from
  EigenDecomposition full;
  covariance_spectrum(delta, dim, &full);
  Tensor cov = covariance_matrix(delta);
  double recon_dev = 0.0;
  {
    double fro = 0.0;
    for (std::size_t r = 0; r < dim; ++r) {
      for (std::size_t c = 0; c < dim; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < dim; ++k)
          acc += full.vectors.at(r, k) * full.values[k] * full.vectors.at(c, k);
        double d = acc - cov.at(r, c);
        fro += d * d;
      }
    }
    recon_dev = std::sqrt(fro);
  }
  if (recon_dev > 1e-8) return {false, "covariance reconstruction off by " + fmt(recon_dev)};

  // eigenvalues against an independent singular-value oracle: the spectrum
  // input is used as-is (centering is the bias-matrix builder's job), so the
  // eigenvalues are squared singular values of the 1/sqrt(n-1) scaled matrix
  std::vector<std::vector<double>> a(rows, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < dim; ++c)
    for (std::size_t r = 0; r < rows; ++r)
      a[r][c] = delta.at(r, c) / std::sqrt(static_cast<double>(rows - 1));
  std::vector<double> sv = jacobi_singular_values(a);
  double eig_rel = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    double want = sv[k] * sv[k];
    eig_rel = std::max(eig_rel, std::abs(full.values[k] - want) /
                                    std::max(std::abs(want), 1e-300));
  }
  if (eig_rel > 1e-8) return {false, "top-10 eigenvalues off by rel " + fmt(eig_rel)};

  // similarity index: self-similarity, rotation and scale invariance
  Tensor xrep = random_tensor(30, 8, rng, 1.0);
  double self_dev = std::abs(cka(xrep, xrep).score - 1.0);
  if (self_dev > 1e-10) return {false, "self-similarity off by " + fmt(self_dev)};

  Tensor rot = Tensor::zeros(8, 8);
  for (std::size_t i = 0; i < 8; ++i) rot.set(i, i, 1.0);
  for (std::size_t i = 0; i + 1 < 8; ++i) {
    double th = rng.uniform() * 3.0;
    Tensor g = Tensor::zeros(8, 8);
    for (std::size_t d = 0; d < 8; ++d) g.set(d, d, 1.0);
    g.set(i, i, std::cos(th));
    g.set(i + 1, i + 1, std::cos(th));
    g.set(i, i + 1, -std::sin(th));
    g.set(i + 1, i, std::sin(th));
    rot = matmul(rot, g);
  }
  double rot_dev = std::abs(cka(xrep, matmul(xrep, rot)).score - 1.0);
  double scale_dev = std::abs(cka(xrep, scale(xrep, 3.7)).score - 1.0);
  if (rot_dev > 1e-8 || scale_dev > 1e-8)
    return {false, "invariance off: rotation " + fmt(rot_dev) + ", scale " + fmt(scale_dev)};

  // two-point dependence hand case: features +1/-1 give a centered gram
  // [[1,-1],[-1,1]]; trace of its square is 4, and (m-1)^2 = 1
  Tensor gram = Tensor::from(2, 2, {1.0, -1.0, -1.0, 1.0});
  double hand_dev = std::abs(hsic(gram, gram) - 4.0);
  if (hand_dev > 1e-12) return {false, "hand case off by " + fmt(hand_dev)};

  return {true, "reconstruction " + fmt(recon_dev) + ", eig rel " + fmt(eig_rel) +
                    ", self " + fmt(self_dev) + ", rot " + fmt(rot_dev) + ", scale " +
                    fmt(scale_dev) + ", hand " + fmt(hand_dev)};
}

// ---------------------------------------------------------------------------
// 9. repeated CLI runs byte-identical
// ---------------------------------------------------------------------------

Outcome criterion_determinism() {
  if (g_cli.empty()) return {false, "no --cli path provided"};
  fs::path cfg = g_config_dir / "smoke.json";
  if (!fs::exists(cfg)) return {false, "missing config " + cfg.string()};
  fs::path run_a = g_out_root / "det-a";
  fs::path run_b = g_out_root / "det-b";
  for (const fs::path& d : {run_a, run_b}) {
    std::string cmd = "\"" + g_cli + "\" run --config \"" + cfg.string() + "\" --out \"" +
                      d.string() + "\" > \"" + (d.string() + ".log") + "\" 2>&1";
    int rc = std::system(cmd.c_str());
    if (rc != 0) return {false, "cli run into " + d.filename().string() + " exited " +
                                    std::to_string(rc)};
  }

  std::vector<std::string> targets;
  for (const auto& entry : fs::recursive_directory_iterator(run_a)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = fs::relative(entry.path(), run_a).string();
    if (rel == "results.csv" || entry.path().extension() == ".ckpt") targets.push_back(rel);
  }
  if (targets.size() < 3)
    return {false, "expected results.csv plus base and tuned checkpoints, found " +
                       std::to_string(targets.size()) + " files"};
  std::sort(targets.begin(), targets.end());
  for (const std::string& rel : targets) {
    if (!fs::exists(run_b / rel)) return {false, rel + " missing from second run"};
    if (slurp(run_a / rel) != slurp(run_b / rel)) return {false, rel + " differs between runs"};
  }
  return {true, std::to_string(targets.size()) + " artifacts byte-identical (results.csv + " +
                    "checkpoints)"};
}

// ---------------------------------------------------------------------------
// 10. few-shot rounds: trainable memory vs prefix
// ---------------------------------------------------------------------------

Outcome criterion_fewshot() {
  fs::path cfg_path = g_config_dir / "fewshot-c6.json";
  std::ifstream in(cfg_path);
  if (!in) return {false, "missing config " + cfg_path.string()};
  nlohmann::json j = nlohmann::json::parse(in);
  g_fewshot_cfg = ExperimentConfig::from_json(j);
  g_fewshot_dir = g_out_root / "fewshot";
  std::ostringstream log;
  g_fewshot_res = run_experiment(g_fewshot_cfg, g_fewshot_dir.string(), log);
  g_fewshot_ok = true;

  std::vector<const ExperimentResult::Cell*> pt(5, nullptr), plus(5, nullptr);
  for (const auto& cell : g_fewshot_res.cells) {
    if (cell.round < 1 || cell.round > 5) continue;
    if (cell.method == "prefix") pt[cell.round - 1] = &cell;
    if (cell.method == "pt-plus") plus[cell.round - 1] = &cell;
  }
  for (int r = 0; r < 5; ++r)
    if (!pt[r] || !plus[r]) return {false, "missing cells for round " + std::to_string(r + 1)};

  double loss_pt = 0.0, loss_plus = 0.0;
  int wins = 0;
  double worst_gap = 1.0;
  for (int r = 0; r < 5; ++r) {
    loss_pt += pt[r]->train_loss / 5.0;
    loss_plus += plus[r]->train_loss / 5.0;
    double gap = plus[r]->iid_acc - pt[r]->iid_acc;
    worst_gap = std::min(worst_gap, gap);
    if (gap > 0.0) ++wins;
    if (plus[r]->iid_acc < pt[r]->iid_acc - 0.02)
      return {false, "round " + std::to_string(r + 1) + ": memory method trails prefix by " +
                         fmt(-gap) + " (> 2pp)"};
  }
  if (!(loss_plus < loss_pt))
    return {false, "mean train loss not lower: " + fmt(loss_plus) + " vs " + fmt(loss_pt)};
  if (wins < 3)
    return {false, "memory method beat prefix in only " + std::to_string(wins) + "/5 rounds"};
  return {true, "mean loss " + fmt(loss_plus) + " < " + fmt(loss_pt) + "; accuracy wins " +
                    std::to_string(wins) + "/5, worst gap " + fmt(worst_gap)};
}

// ---------------------------------------------------------------------------
// 11. bias-spectrum participation ratio: memory method >= prefix
// ---------------------------------------------------------------------------

Outcome criterion_participation() {
  if (!g_fewshot_ok) return {false, "few-shot artifacts unavailable"};
  Dataset ds = generate(g_fewshot_cfg.iid_task);
  ModelState base =
      load_checkpoint((g_fewshot_dir / g_fewshot_res.base_checkpoint).string());
  Tensor base_rows = probe_rows(base, ds, 32);

  fs::path curves = g_fewshot_dir / "spectra";
  fs::create_directories(curves);
  double pr_pt = 0.0, pr_plus = 0.0;
  for (const std::string& label : {std::string("prefix"), std::string("pt-plus")}) {
    ModelState tuned =
        load_checkpoint((g_fewshot_dir / "tuned" / (label + "-round1.ckpt")).string());
    Tensor rows = probe_rows(tuned, ds, 32);
    Tensor delta = bias_matrix(base_rows, rows);
    SpectrumReport rep = covariance_spectrum(delta, delta.cols());
    std::ofstream(curves / (label + ".csv")) << spectrum_csv(rep.eigenvalues, label);
    double pr = participation_ratio(rep.eigenvalues);
    (label == "prefix" ? pr_pt : pr_plus) = pr;
  }
  bool pass = pr_plus >= pr_pt;
  return {pass, "participation ratio " + fmt(pr_plus) + " (memory) vs " + fmt(pr_pt) +
                    " (prefix), effect " + fmt(pr_plus - pr_pt) + "; curves in " +
                    curves.string()};
}

// ---------------------------------------------------------------------------
// 12. similarity to base non-increasing in prefix length
// ---------------------------------------------------------------------------

Outcome criterion_cka_sweep() {
  fs::path cfg_path = g_config_dir / "prefix-sweep.json";
  std::ifstream in(cfg_path);
  if (!in) return {false, "missing config " + cfg_path.string()};
  ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::json::parse(in));
  fs::path out_dir = g_out_root / "sweep";
  std::ostringstream log;
  ExperimentResult res = run_experiment(cfg, out_dir.string(), log);

  Dataset ds = generate(cfg.iid_task);
  ModelState base = load_checkpoint((out_dir / res.base_checkpoint).string());
  Tensor base_rows = probe_rows(base, ds, 32);

  std::vector<double> scores;
  for (const std::string& label :
       {std::string("prefix-p4"), std::string("prefix-p8"), std::string("prefix-p16")}) {
    ModelState tuned =
        load_checkpoint((out_dir / "tuned" / (label + "-round1.ckpt")).string());
    scores.push_back(cka(base_rows, probe_rows(tuned, ds, 32)).score);
  }
  bool pass = scores[0] >= scores[1] && scores[1] >= scores[2];
  return {pass, "cka p4=" + fmt(scores[0]) + ", p8=" + fmt(scores[1]) + ", p16=" +
                    fmt(scores[2]) + (pass ? " (non-increasing)" : " (order violated)")};
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--cli") g_cli = argv[i + 1];
#ifdef PTLAB_CONFIG_DIR
  g_config_dir = PTLAB_CONFIG_DIR;
#else
  g_config_dir = "configs";
#endif
  g_out_root = fs::temp_directory_path() / "ptlab-acceptance";
  std::error_code ec;
  fs::remove_all(g_out_root, ec);
  fs::create_directories(g_out_root);

  std::printf("acceptance gate (artifacts in %s)\n", g_out_root.string().c_str());
  run_criterion(1, "token-stream and matrix softmax attention agree", 5.0,
                criterion_token_vs_matrix);
  run_criterion(2, "prefix attention equals convex decomposition; mixture mass monotone", 5.0,
                criterion_decomposition);
  run_criterion(3, "kernelized prefix equals initialized memory form; linearized hybrid matches "
                   "flat reference", 5.0, criterion_memory_forms);
  run_criterion(4, "neutral initializations reproduce base attention on mha and gqa", 0.0,
                criterion_degeneracy);
  run_criterion(5, "autodiff gradients match central finite differences on all trainables",
                60.0, criterion_gradients);
  run_criterion(6, "frozen base weights bit-exact after 50 fine-tuning steps per method", 0.0,
                criterion_frozen_base);
  run_criterion(7, "optimizer matches independent reference; decoupled decay contracts exactly",
                0.0, criterion_optimizer);
  run_criterion(8, "spectrum, similarity, and dependence diagnostics match oracles", 0.0,
                criterion_diagnostics);
  run_criterion(9, "repeated cli runs byte-identical (results csv and checkpoints)", 0.0,
                criterion_determinism);
  run_criterion(10, "few-shot rounds: memory method beats prefix on loss and accuracy", 900.0,
                criterion_fewshot);
  run_criterion(11, "bias-spectrum participation ratio: memory method >= prefix", 0.0,
                criterion_participation);
  run_criterion(12, "similarity to base non-increasing in prefix length", 0.0,
                criterion_cka_sweep);

  std::printf("acceptance: %d/12 passed\n", 12 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
