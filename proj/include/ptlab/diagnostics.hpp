// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Representation-shift diagnostics: bias matrices (tuned minus base
// activations), covariance spectra via cyclic Jacobi, HSIC / linear CKA
// similarity, attention-map extraction, and prefix mixture-weight traces.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptlab/model.hpp"
#include "ptlab/tensor.hpp"

namespace ptlab {

// ---------------------------------------------------------------------------
// Bias matrix: how a tuned model shifts activations relative to its base.
// ---------------------------------------------------------------------------

// Elementwise difference tuned - base over matched activation rows, then
// column-centered. With standardize=true each column is also scaled to unit
// sample variance; columns with (near-)zero variance are centered but left
// unscaled so constant coordinates do not blow up.
inline Tensor bias_matrix(const Tensor& base_f, const Tensor& tuned_f,
                          bool standardize = true) {
  if (base_f.rows() != tuned_f.rows() || base_f.cols() != tuned_f.cols()) {
    throw std::invalid_argument("bias_matrix: shape mismatch " +
                                detail::shape_str(base_f) + " vs " + detail::shape_str(tuned_f));
  }
  if (base_f.rows() < 1) throw std::invalid_argument("bias_matrix: empty input");
  const std::size_t n = base_f.rows(), d = base_f.cols();
  Tensor out = Tensor::zeros(n, d);
  auto& v = out.mutable_values();
  const auto& b = base_f.values();
  const auto& t = tuned_f.values();
  for (std::size_t i = 0; i < n * d; ++i) v[i] = t[i] - b[i];
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v[i * d + j];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v[i * d + j] -= mean;
    if (!standardize || n < 2) continue;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += v[i * d + j] * v[i * d + j];
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd > 1e-12) {
      for (std::size_t i = 0; i < n; ++i) v[i * d + j] /= sd;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver: cyclic Jacobi rotations.
// ---------------------------------------------------------------------------

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Tensor vectors;              // column j pairs with values[j]
};

// Cyclic Jacobi with full sweeps; converged when every off-diagonal entry is
// below 1e-12 in magnitude. Intended for the small (d <= a few hundred)
// symmetric matrices produced by covariance analysis.
inline EigenDecomposition jacobi_eigen_sym(const Tensor& sym) {
  if (sym.rows() != sym.cols()) {
    throw std::invalid_argument("jacobi_eigen_sym: matrix must be square, got " +
                                detail::shape_str(sym));
  }
  const std::size_t d = sym.rows();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      if (std::fabs(sym.at(i, j) - sym.at(j, i)) > 1e-9) {
        throw std::invalid_argument("jacobi_eigen_sym: matrix is not symmetric");
      }
    }
  }
  std::vector<double> a(sym.values());
  std::vector<double> vec(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) vec[i * d + i] = 1.0;
  constexpr double kOffTol = 1e-12;
  constexpr int kMaxSweeps = 128;
  auto off = [&]() {
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j)
        m = std::max(m, std::fabs(a[i * d + j]));
    return m;
  };
  int sweep = 0;
  while (d > 1 && off() > kOffTol) {
    if (++sweep > kMaxSweeps) {
      throw std::runtime_error("jacobi_eigen_sym: no convergence after 128 sweeps");
    }
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::fabs(apq) <= kOffTol) continue;
        const double app = a[p * d + p], aqq = a[q * d + q];
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = vec[k * d + p], vkq = vec[k * d + q];
          vec[k * d + p] = c * vkp - s * vkq;
          vec[k * d + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
    return a[x * d + x] > a[y * d + y];
  });
  EigenDecomposition out;
  out.values.resize(d);
  out.vectors = Tensor::zeros(d, d);
  auto& vv = out.vectors.mutable_values();
  for (std::size_t j = 0; j < d; ++j) {
    out.values[j] = a[idx[j] * d + idx[j]];
    for (std::size_t i = 0; i < d; ++i) vv[i * d + j] = vec[i * d + idx[j]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Covariance spectrum of a bias matrix.
// ---------------------------------------------------------------------------

struct SpectrumReport {
  std::vector<double> eigenvalues;  // top-k, descending
  std::size_t n_rows = 0;           // activation rows used
  std::size_t dim = 0;              // feature dimension
};

inline Tensor covariance_matrix(const Tensor& delta_f) {
  if (delta_f.rows() < 2) {
    throw std::invalid_argument("covariance_matrix: need at least 2 rows, got " +
                                std::to_string(delta_f.rows()));
  }
  TapePause pause;
  return scale(matmul(transpose(delta_f), delta_f),
               1.0 / static_cast<double>(delta_f.rows() - 1));
}

inline SpectrumReport covariance_spectrum(const Tensor& delta_f, std::size_t top_k,
                                          EigenDecomposition* full_out = nullptr) {
  const Tensor cov = covariance_matrix(delta_f);
  EigenDecomposition eig = jacobi_eigen_sym(cov);
  SpectrumReport rep;
  rep.n_rows = delta_f.rows();
  rep.dim = delta_f.cols();
  const std::size_t k = std::min(top_k, eig.values.size());
  rep.eigenvalues.assign(eig.values.begin(), eig.values.begin() + k);
  if (full_out != nullptr) *full_out = std::move(eig);
  return rep;
}

// Effective number of directions carrying the shift: (sum l)^2 / sum l^2.
// A single dominant direction gives 1; a flat spectrum over r directions
// gives r. Zero spectra map to 0.
inline double participation_ratio(const std::vector<double>& eigenvalues) {
  double s1 = 0.0, s2 = 0.0;
  for (double l : eigenvalues) {
    const double lc = std::max(l, 0.0);  // clamp tiny negative round-off
    s1 += lc;
    s2 += lc * lc;
  }
  if (s2 <= 0.0) return 0.0;
  return s1 * s1 / s2;
}

// ---------------------------------------------------------------------------
// HSIC and linear CKA between representations.
// ---------------------------------------------------------------------------

// Biased HSIC estimate from precomputed Gram matrices:
//   HSIC(K, L) = tr(K H L H) / (m - 1)^2,  H = I - 11^T / m.
inline double hsic(const Tensor& k_x, const Tensor& k_y) {
  if (k_x.rows() != k_x.cols() || k_y.rows() != k_y.cols() ||
      k_x.rows() != k_y.rows()) {
    throw std::invalid_argument("hsic: Gram matrices must be square and matched, got " +
                                detail::shape_str(k_x) + " and " + detail::shape_str(k_y));
  }
  const std::size_t m = k_x.rows();
  if (m < 2) throw std::invalid_argument("hsic: need at least 2 samples");
  auto check_sym = [](const Tensor& k, const char* name) {
    for (std::size_t i = 0; i < k.rows(); ++i) {
      for (std::size_t j = i + 1; j < k.cols(); ++j) {
        if (std::fabs(k.at(i, j) - k.at(j, i)) > 1e-10) {
          throw std::invalid_argument(std::string("hsic: ") + name +
                                      " Gram matrix is not symmetric");
        }
      }
    }
  };
  check_sym(k_x, "first");
  check_sym(k_y, "second");
  // Double-center one factor; tr(K H L H) equals <K, H L H> elementwise.
  auto centered = [m](const Tensor& k) {
    std::vector<double> row(m, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) row[i] += k.at(i, j);
      grand += row[i];
      row[i] /= static_cast<double>(m);
    }
    grand /= static_cast<double>(m) * static_cast<double>(m);
    std::vector<double> out(m * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out[i * m + j] = k.at(i, j) - row[i] - row[j] + grand;
    return out;
  };
  const std::vector<double> ly = centered(k_y);
  double tr = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) tr += k_x.at(i, j) * ly[j * m + i];
  const double denom = static_cast<double>(m - 1) * static_cast<double>(m - 1);
  return tr / denom;
}

inline Tensor gram_linear(const Tensor& x) {
  TapePause pause;
  return matmul(x, transpose(x));
}

struct CkaReport {
  double score = 0.0;
  std::size_t m = 0;  // sample rows compared
};

// Linear-kernel CKA between row-aligned representations X [m x d1], Y [m x d2]:
//   CKA = HSIC(XX^T, YY^T) / sqrt(HSIC(XX^T, XX^T) * HSIC(YY^T, YY^T)).
// Invariant to orthogonal transforms and isotropic scaling of either side.
inline CkaReport cka(const Tensor& x, const Tensor& y) {
  if (x.rows() != y.rows()) {
    throw std::invalid_argument("cka: row count mismatch " + detail::shape_str(x) +
                                " vs " + detail::shape_str(y));
  }
  const Tensor kx = gram_linear(x);
  const Tensor ky = gram_linear(y);
  const double cross = hsic(kx, ky);
  const double sx = hsic(kx, kx);
  const double sy = hsic(ky, ky);
  if (sx < 1e-15 || sy < 1e-15) {
    throw std::invalid_argument(
        "cka: degenerate representation (constant rows give zero self-HSIC)");
  }
  CkaReport rep;
  rep.m = x.rows();
  rep.score = cross / std::sqrt(sx * sy);
  return rep;
}

// ---------------------------------------------------------------------------
// Attention maps and prefix mixture weights from a forward trace.
// ---------------------------------------------------------------------------

struct AttentionMap {
  Tensor weights;  // [n x n] over input positions, rows sum to 1
  std::size_t layer = 0;
  std::size_t head = 0;
  std::string method;
};

namespace detail {

inline const Tensor& traced_probs(const ModelState& st, const ForwardTrace& trace,
                                  std::size_t layer, std::size_t head) {
  if (layer >= trace.probs.size()) {
    throw std::out_of_range("diagnostics: layer " + std::to_string(layer) +
                            " out of range (model has " +
                            std::to_string(trace.probs.size()) + ")");
  }
  if (head >= trace.probs[layer].size()) {
    throw std::out_of_range("diagnostics: head " + std::to_string(head) +
                            " out of range (layer has " +
                            std::to_string(trace.probs[layer].size()) + ")");
  }
  (void)st;
  return trace.probs[layer][head];
}

}  // namespace detail

// Post-softmax attention over input positions. For prefix-augmented layers the
// prefix columns are dropped and each row is renormalized so rows sum to 1;
// this is the conditional distribution over inputs given the input branch.
inline AttentionMap extract_attention_map(const ModelState& st,
                                          const std::vector<std::uint32_t>& tokens,
                                          std::size_t layer, std::size_t head) {
  ForwardTrace trace;
  forward(st, tokens, &trace);
  const Tensor& probs = detail::traced_probs(st, trace, layer, head);
  const std::size_t n = tokens.size();
  if (probs.cols() < n) {
    throw std::runtime_error("extract_attention_map: traced width " +
                             std::to_string(probs.cols()) + " below input length");
  }
  const std::size_t p = probs.cols() - n;
  AttentionMap map;
  map.layer = layer;
  map.head = head;
  map.method = to_string(st.cfg.method.kind);
  map.weights = Tensor::zeros(n, n);
  auto& w = map.weights.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    double input_mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) input_mass += probs.at(i, p + j);
    if (input_mass <= 0.0) {
      throw std::runtime_error("extract_attention_map: row " + std::to_string(i) +
                               " has no input mass");
    }
    for (std::size_t j = 0; j < n; ++j)
      w[i * n + j] = probs.at(i, p + j) / input_mass;
  }
  return map;
}

// Total prefix mass per query position: alpha_i = sum of the prefix columns of
// row i in the traced flat softmax. Only defined for prefix-style layers with
// at least one prefix slot.
inline std::vector<double> alpha_trace(const ModelState& st,
                                       const std::vector<std::uint32_t>& tokens,
                                       std::size_t layer, std::size_t head) {
  if (st.cfg.method.kind != MethodKind::Prefix) {
    throw std::invalid_argument("alpha_trace: method '" +
                                to_string(st.cfg.method.kind) +
                                "' has no prefix mixture weights");
  }
  if (st.cfg.method.prefix_len == 0) {
    throw std::invalid_argument("alpha_trace: prefix length is 0");
  }
  ForwardTrace trace;
  forward(st, tokens, &trace);
  const Tensor& probs = detail::traced_probs(st, trace, layer, head);
  const std::size_t n = tokens.size();
  if (probs.cols() <= n) {
    throw std::runtime_error("alpha_trace: traced weights carry no prefix columns");
  }
  const std::size_t p = probs.cols() - n;
  std::vector<double> alpha(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) alpha[i] += probs.at(i, j);
  return alpha;
}

// ---------------------------------------------------------------------------
// Report serialization.
// ---------------------------------------------------------------------------

inline constexpr const char* kSpectrumCsvSchema = "# ptlab-csv spectrum v1";

// Eigenvalue curve rows: rank (1-based), eigenvalue, method label.
inline std::string spectrum_csv(const std::vector<double>& eigenvalues,
                                const std::string& method) {
  std::ostringstream os;
  os << kSpectrumCsvSchema << "\n";
  os << "rank,eigenvalue,method\n";
  os.precision(17);
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    os << (i + 1) << "," << eigenvalues[i] << "," << method << "\n";
  }
  return os.str();
}

inline nlohmann::json spectrum_to_json(const SpectrumReport& rep,
                                       const std::string& method) {
  return nlohmann::json{{"method", method},
                        {"eigenvalues", rep.eigenvalues},
                        {"n_rows", rep.n_rows},
                        {"dim", rep.dim},
                        {"participation_ratio", participation_ratio(rep.eigenvalues)}};
}

inline nlohmann::json cka_to_json(const CkaReport& rep, const std::string& method,
                                  std::size_t layer) {
  return nlohmann::json{{"method", method},
                        {"layer", layer},
                        {"kernel", "linear"},
                        {"m", rep.m},
                        {"score", rep.score}};
}

inline nlohmann::json attention_map_to_json(const AttentionMap& map) {
  std::vector<std::vector<double>> rows(map.weights.rows());
  for (std::size_t i = 0; i < map.weights.rows(); ++i) {
    rows[i].resize(map.weights.cols());
    for (std::size_t j = 0; j < map.weights.cols(); ++j)
      rows[i][j] = map.weights.at(i, j);
  }
  return nlohmann::json{{"layer", map.layer},
                        {"head", map.head},
                        {"method", map.method},
                        {"weights", rows}};
}

}  // namespace ptlab
