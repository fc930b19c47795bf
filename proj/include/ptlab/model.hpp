// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer: token + learned position embeddings,
// pre-norm residual blocks (attention, then an elu feed-forward), an output
// projection to vocab logits. Any of the context-tuning methods can be
// mounted per layer; base weights are frozen (requires_grad off) unless the
// method is full fine-tuning, so the trainable partition is exactly the
// method's parameter set.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptlab/attention.hpp"
#include "ptlab/peft.hpp"
#include "ptlab/rng.hpp"
#include "ptlab/tensor.hpp"

namespace ptlab {

enum class MethodKind { Base, Icl, Prefix, PtPlus, Hybrid, Lora, Full };

inline std::string to_string(MethodKind k) {
  switch (k) {
    case MethodKind::Base: return "base";
    case MethodKind::Icl: return "icl";
    case MethodKind::Prefix: return "prefix";
    case MethodKind::PtPlus: return "pt-plus";
    case MethodKind::Hybrid: return "hybrid";
    case MethodKind::Lora: return "lora";
    case MethodKind::Full: return "full";
  }
  throw std::logic_error("unknown method kind");
}

inline MethodKind method_kind_from(const std::string& s) {
  if (s == "base") return MethodKind::Base;
  if (s == "icl") return MethodKind::Icl;
  if (s == "prefix") return MethodKind::Prefix;
  if (s == "pt-plus") return MethodKind::PtPlus;
  if (s == "hybrid") return MethodKind::Hybrid;
  if (s == "lora") return MethodKind::Lora;
  if (s == "full") return MethodKind::Full;
  throw std::invalid_argument("unknown method: " + s);
}

struct MethodSpec {
  MethodKind kind = MethodKind::Base;
  std::size_t prefix_len = 8;                          // prefix
  std::size_t d_phi = 16;                              // pt-plus / hybrid
  FeatureMapKind phi_kind = FeatureMapKind::EluPlusOne;
  bool trainable_phi = false;
  std::size_t rank = 4;                                // lora
  unsigned lora_targets = kLoraQ | kLoraV;

  nlohmann::json to_json() const {
    return nlohmann::json{{"kind", to_string(kind)},
                          {"prefix_len", prefix_len},
                          {"d_phi", d_phi},
                          {"phi_kind", to_string(phi_kind)},
                          {"trainable_phi", trainable_phi},
                          {"rank", rank},
                          {"lora_targets", lora_targets}};
  }

  static MethodSpec from_json(const nlohmann::json& j) {
    MethodSpec m;
    m.kind = method_kind_from(j.at("kind").get<std::string>());
    m.prefix_len = j.at("prefix_len").get<std::size_t>();
    m.d_phi = j.at("d_phi").get<std::size_t>();
    m.phi_kind = feature_map_kind_from(j.at("phi_kind").get<std::string>());
    m.trainable_phi = j.at("trainable_phi").get<bool>();
    m.rank = j.at("rank").get<std::size_t>();
    m.lora_targets = j.at("lora_targets").get<unsigned>();
    return m;
  }
};

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t ffn_width = 64;
  std::size_t max_seq = 160;
  AttentionConfig attn;
  MethodSpec method;
  std::uint64_t seed = 1;

  ModelConfig() {
    attn.d_model = d_model;
    attn.d_k = 8;
    attn.d_v = 8;
    attn.n_heads = 4;
    attn.n_kv_heads = 4;
    attn.causal = true;
  }

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("model needs at least one layer");
    if (ffn_width < d_model)
      throw std::invalid_argument("ffn_width must be at least d_model");
    if (vocab < 4) throw std::invalid_argument("vocab too small");
    if (max_seq < 2) throw std::invalid_argument("max_seq too small");
    if (attn.d_model != d_model)
      throw std::invalid_argument("attention d_model disagrees with the model");
    attn.validate();
    if ((method.kind == MethodKind::PtPlus || method.kind == MethodKind::Hybrid) &&
        method.d_phi < 1)
      throw std::invalid_argument("d_phi must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"vocab", vocab},
                          {"d_model", d_model},
                          {"n_layers", n_layers},
                          {"ffn_width", ffn_width},
                          {"max_seq", max_seq},
                          {"attn",
                           {{"d_k", attn.d_k},
                            {"d_v", attn.d_v},
                            {"n_heads", attn.n_heads},
                            {"n_kv_heads", attn.n_kv_heads},
                            {"causal", attn.causal}}},
                          {"method", method.to_json()},
                          {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab = j.at("vocab").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.ffn_width = j.at("ffn_width").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    const auto& a = j.at("attn");
    c.attn.d_model = c.d_model;
    c.attn.d_k = a.at("d_k").get<std::size_t>();
    c.attn.d_v = a.at("d_v").get<std::size_t>();
    c.attn.n_heads = a.at("n_heads").get<std::size_t>();
    c.attn.n_kv_heads = a.at("n_kv_heads").get<std::size_t>();
    c.attn.causal = a.at("causal").get<bool>();
    c.method = MethodSpec::from_json(j.at("method"));
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

// Per-layer mount point for whichever method is active.
struct LayerPeft {
  PrefixParams prefix;       // prefix
  FeatureMapSpec phi;        // pt-plus / hybrid, shared across heads
  std::vector<Tensor> m, n;  // per query head
  LoraParams lora;           // lora
};

struct LayerState {
  Tensor g1;  // pre-attention norm gain [1 x d_model]
  AttentionWeights attn;
  Tensor g2;  // pre-ffn norm gain
  Tensor w1, b1, w2, b2;
  LayerPeft peft;
};

struct ModelState {
  ModelConfig cfg;
  Tensor embedding;  // [vocab x d_model]
  Tensor pos;        // [max_seq x d_model]
  std::vector<LayerState> layers;
  Tensor g_final;
  Tensor w_out;  // [d_model x vocab]
};

struct NamedParam {
  std::string name;
  Tensor tensor;  // shared handle into the model state
  bool peft = false;
};

// Canonical parameter walk; checkpointing, checksums, and the optimizer all
// rely on this order being stable.
inline std::vector<NamedParam> named_params(const ModelState& st) {
  std::vector<NamedParam> out;
  auto put = [&](std::string name, const Tensor& t, bool peft = false) {
    if (t.valid()) out.push_back({std::move(name), t, peft});
  };
  put("embedding", st.embedding);
  put("pos", st.pos);
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const LayerState& ls = st.layers[l];
    std::string pre = "layer" + std::to_string(l) + ".";
    put(pre + "norm1.g", ls.g1);
    for (std::size_t h = 0; h < ls.attn.w_q.size(); ++h)
      put(pre + "attn.w_q" + std::to_string(h), ls.attn.w_q[h]);
    for (std::size_t h = 0; h < ls.attn.w_k.size(); ++h)
      put(pre + "attn.w_k" + std::to_string(h), ls.attn.w_k[h]);
    for (std::size_t h = 0; h < ls.attn.w_v.size(); ++h)
      put(pre + "attn.w_v" + std::to_string(h), ls.attn.w_v[h]);
    put(pre + "attn.w_o", ls.attn.w_o);
    put(pre + "norm2.g", ls.g2);
    put(pre + "ffn.w1", ls.w1);
    put(pre + "ffn.b1", ls.b1);
    put(pre + "ffn.w2", ls.w2);
    put(pre + "ffn.b2", ls.b2);
  }
  put("final_norm.g", st.g_final);
  put("w_out", st.w_out);
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const LayerPeft& pf = st.layers[l].peft;
    std::string pre = "layer" + std::to_string(l) + ".peft.";
    put(pre + "prefix_s", pf.prefix.s, true);
    put(pre + "phi_w", pf.phi.w_phi, true);
    put(pre + "phi_b", pf.phi.b_phi, true);
    for (std::size_t h = 0; h < pf.m.size(); ++h)
      put(pre + "m" + std::to_string(h), pf.m[h], true);
    for (std::size_t h = 0; h < pf.n.size(); ++h)
      put(pre + "n" + std::to_string(h), pf.n[h], true);
    auto put_factors = [&](const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                           const char* tag) {
      for (std::size_t h = 0; h < a.size(); ++h)
        put(pre + "lora_a" + tag + std::to_string(h), a[h], true);
      for (std::size_t h = 0; h < b.size(); ++h)
        put(pre + "lora_b" + tag + std::to_string(h), b[h], true);
    };
    put_factors(pf.lora.a_q, pf.lora.b_q, "q");
    put_factors(pf.lora.a_k, pf.lora.b_k, "k");
    put_factors(pf.lora.a_v, pf.lora.b_v, "v");
  }
  return out;
}

inline std::vector<Tensor> trainable_params(const ModelState& st) {
  std::vector<Tensor> out;
  for (const NamedParam& p : named_params(st))
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

inline std::size_t trainable_scalar_count(const ModelState& st) {
  std::size_t n = 0;
  for (const Tensor& t : trainable_params(st)) n += t.size();
  return n;
}

// FNV-1a over the raw bytes of every frozen parameter, walk order. Any
// training step that touches a frozen weight changes this value.
inline std::uint64_t frozen_checksum(const ModelState& st) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&](const void* data, std::size_t len) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const NamedParam& p : named_params(st)) {
    if (p.tensor.requires_grad()) continue;
    mix_bytes(p.name.data(), p.name.size());
    mix_bytes(p.tensor.values().data(), p.tensor.size() * sizeof(double));
  }
  return h;
}

namespace detail {

// Sets requires_grad so the trainable set is exactly the method definition.
inline void apply_partition(ModelState& st) {
  bool full = st.cfg.method.kind == MethodKind::Full;
  for (NamedParam& p : named_params(st)) {
    bool trainable = p.peft ? true : full;
    if (p.peft && (p.name.find("phi_w") != std::string::npos ||
                   p.name.find("phi_b") != std::string::npos))
      trainable = st.cfg.method.trainable_phi;
    p.tensor.set_requires_grad(trainable);
  }
}

}  // namespace detail

inline ModelState init_model(const ModelConfig& cfg) {
  cfg.validate();
  ModelState st;
  st.cfg = cfg;
  SplitRng rng(cfg.seed, "model-init");
  const double stddev = 0.08;
  st.embedding = random_tensor(cfg.vocab, cfg.d_model, rng, stddev);
  st.pos = random_tensor(cfg.max_seq, cfg.d_model, rng, stddev);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerState ls;
    ls.g1 = Tensor::ones(1, cfg.d_model);
    ls.attn = AttentionWeights::init(cfg.attn, rng, stddev);
    ls.g2 = Tensor::ones(1, cfg.d_model);
    ls.w1 = random_tensor(cfg.d_model, cfg.ffn_width, rng, stddev);
    ls.b1 = Tensor::zeros(1, cfg.ffn_width);
    ls.w2 = random_tensor(cfg.ffn_width, cfg.d_model, rng, stddev);
    ls.b2 = Tensor::zeros(1, cfg.d_model);
    st.layers.push_back(std::move(ls));
  }
  st.g_final = Tensor::ones(1, cfg.d_model);
  st.w_out = random_tensor(cfg.d_model, cfg.vocab, rng, stddev);

  const MethodSpec& m = cfg.method;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerPeft& pf = st.layers[l].peft;
    switch (m.kind) {
      case MethodKind::Base:
      case MethodKind::Icl:
      case MethodKind::Full:
        break;
      case MethodKind::Prefix:
        pf.prefix = PrefixParams::init(m.prefix_len, cfg.d_model, rng);
        break;
      case MethodKind::PtPlus:
      case MethodKind::Hybrid: {
        pf.phi = m.phi_kind == FeatureMapKind::ReluAffine
                     ? FeatureMapSpec::relu_affine(m.d_phi, cfg.attn.d_k, rng)
                     : (m.phi_kind == FeatureMapKind::RawElu ? FeatureMapSpec::raw_elu()
                                                             : FeatureMapSpec::elu_plus_one());
        std::size_t width = pf.phi.d_phi(cfg.attn.d_k);
        // zero init: the mounted model coincides with the base model
        for (std::size_t h = 0; h < cfg.attn.n_heads; ++h) {
          pf.m.push_back(Tensor::zeros(width, cfg.attn.d_v));
          if (m.kind == MethodKind::Hybrid) pf.n.push_back(Tensor::zeros(width, 1));
        }
        break;
      }
      case MethodKind::Lora:
        pf.lora = LoraParams::init(cfg.attn, m.rank, m.lora_targets, rng);
        break;
    }
  }
  detail::apply_partition(st);
  return st;
}

// A deep copy: fresh TensorData everywhere, preserving trainability flags.
inline ModelState clone_model(const ModelState& st) {
  ModelState out = st;
  auto deep = [](Tensor& t) {
    if (!t.valid()) return;
    bool rg = t.requires_grad();
    t = t.detached_copy();
    t.set_requires_grad(rg);
  };
  deep(out.embedding);
  deep(out.pos);
  for (LayerState& ls : out.layers) {
    deep(ls.g1);
    for (Tensor& t : ls.attn.w_q) deep(t);
    for (Tensor& t : ls.attn.w_k) deep(t);
    for (Tensor& t : ls.attn.w_v) deep(t);
    deep(ls.attn.w_o);
    deep(ls.g2);
    deep(ls.w1);
    deep(ls.b1);
    deep(ls.w2);
    deep(ls.b2);
    deep(ls.peft.prefix.s);
    deep(ls.peft.phi.w_phi);
    deep(ls.peft.phi.b_phi);
    for (Tensor& t : ls.peft.m) deep(t);
    for (Tensor& t : ls.peft.n) deep(t);
    for (Tensor& t : ls.peft.lora.a_q) deep(t);
    for (Tensor& t : ls.peft.lora.b_q) deep(t);
    for (Tensor& t : ls.peft.lora.a_k) deep(t);
    for (Tensor& t : ls.peft.lora.b_k) deep(t);
    for (Tensor& t : ls.peft.lora.a_v) deep(t);
    for (Tensor& t : ls.peft.lora.b_v) deep(t);
  }
  deep(out.g_final);
  deep(out.w_out);
  return out;
}

// Mounts a method onto an existing (typically pretrained) base: fresh method
// parameters seeded by `seed`, base weights copied over, partition applied by
// the method definition.
inline ModelState mount_method(const ModelState& base, const MethodSpec& method,
                               std::uint64_t seed) {
  ModelConfig cfg = base.cfg;
  cfg.method = method;
  cfg.seed = seed;
  ModelState st = init_model(cfg);
  std::vector<NamedParam> dst = named_params(st);
  std::vector<NamedParam> src = named_params(base);
  std::size_t si = 0;
  for (NamedParam& d : dst) {
    if (d.peft) continue;
    while (si < src.size() && src[si].peft) ++si;
    if (si >= src.size() || src[si].name != d.name)
      throw std::logic_error("mount_method: base parameter walk mismatch at '" + d.name + "'");
    if (src[si].tensor.rows() != d.tensor.rows() || src[si].tensor.cols() != d.tensor.cols())
      throw std::invalid_argument("mount_method: shape mismatch on '" + d.name + "'");
    d.tensor.mutable_values() = src[si].tensor.values();
    ++si;
  }
  return st;
}

// Captured per-forward internals for the analysis instruments.
struct ForwardTrace {
  // probs[layer][head]: detached post-softmax weights. For prefix layers the
  // shape is [n x (p + n)] with prefix columns first; otherwise [n x n].
  std::vector<std::vector<Tensor>> probs;
  // attn_outputs[layer]: detached attention block output (after W_O, before
  // the residual add), [n x d_model].
  std::vector<Tensor> attn_outputs;
};

namespace detail {

inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  const double eps = 1e-8;
  std::size_t d = x.cols();
  Tensor ms = scale(matmul(mul(x, x), Tensor::ones(d, 1)), 1.0 / static_cast<double>(d));
  Tensor denom = vsqrt(add(ms, Tensor::full(1, 1, eps)));
  Tensor normed = transpose(divide(transpose(x), transpose(denom)));
  return mul(normed, gain);
}

inline Tensor onehot_rows(const std::vector<std::uint32_t>& tokens, std::size_t vocab) {
  Tensor out = Tensor::zeros(tokens.size(), vocab);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab)
      throw std::out_of_range("token id " + std::to_string(tokens[i]) +
                              " outside vocab of " + std::to_string(vocab));
    out.set(i, tokens[i], 1.0);
  }
  return out;
}

}  // namespace detail

inline Tensor forward(const ModelState& st, const std::vector<std::uint32_t>& tokens,
                      ForwardTrace* trace = nullptr) {
  const ModelConfig& cfg = st.cfg;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq)
    throw std::invalid_argument("forward: sequence length " +
                                std::to_string(tokens.size()) + " exceeds max_seq " +
                                std::to_string(cfg.max_seq));
  std::size_t n = tokens.size();
  if (trace) {
    trace->probs.assign(cfg.n_layers, {});
    trace->attn_outputs.assign(cfg.n_layers, Tensor());
  }

  Tensor x = add(matmul(detail::onehot_rows(tokens, cfg.vocab), st.embedding),
                 slice_rows(st.pos, 0, n));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerState& ls = st.layers[l];
    Tensor xn = detail::rms_norm(x, ls.g1);

    std::vector<Tensor>* probs = trace ? &trace->probs[l] : nullptr;
    HeadForward head_fn;
    const LayerPeft& pf = ls.peft;
    switch (cfg.method.kind) {
      case MethodKind::Base:
      case MethodKind::Icl:
      case MethodKind::Full:
        break;  // plain heads
      case MethodKind::Prefix:
        head_fn = [&, probs](std::size_t, const HeadWeights& hw) {
          Tensor pr;
          Tensor out = pt_forward(xn, hw, pf.prefix, cfg.attn, probs ? &pr : nullptr);
          if (probs) probs->push_back(pr);
          return out;
        };
        break;
      case MethodKind::PtPlus:
        head_fn = [&, probs](std::size_t h, const HeadWeights& hw) {
          Tensor pr;
          Tensor out = ptplus_forward(xn, hw, pf.m[h], pf.phi, cfg.attn,
                                      probs ? &pr : nullptr);
          if (probs) probs->push_back(pr);
          return out;
        };
        break;
      case MethodKind::Hybrid:
        head_fn = [&, probs](std::size_t h, const HeadWeights& hw) {
          Tensor pr;
          Tensor out = inhead_hybrid_forward(xn, hw, pf.m[h], pf.n[h], pf.phi, cfg.attn,
                                             SimKind::Exp, probs ? &pr : nullptr);
          if (probs) probs->push_back(pr);
          return out;
        };
        break;
      case MethodKind::Lora:
        break;  // handled by substituting weights below
    }

    Tensor attn_out;
    if (cfg.method.kind == MethodKind::Lora) {
      attn_out = multi_head_forward(xn, lora_apply(ls.attn, pf.lora, cfg.attn), cfg.attn,
                                    {}, probs);
    } else if (head_fn) {
      attn_out = multi_head_forward(xn, ls.attn, cfg.attn, head_fn);
    } else {
      attn_out = multi_head_forward(xn, ls.attn, cfg.attn, {}, probs);
    }
    if (trace) trace->attn_outputs[l] = attn_out.detached_copy();

    x = add(x, attn_out);
    Tensor hn = detail::rms_norm(x, ls.g2);
    Tensor ffn = add(matmul(elu(add(matmul(hn, ls.w1), ls.b1)), ls.w2), ls.b2);
    x = add(x, ffn);
  }
  return matmul(detail::rms_norm(x, st.g_final), st.w_out);
}

// Mean cross-entropy over the masked positions; targets[i] is the token the
// logit row i must predict. Only masked entries of targets are read.
inline Tensor loss_next_token(const Tensor& logits, const std::vector<std::uint32_t>& targets,
                              const std::vector<bool>& mask) {
  std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n || mask.size() != n)
    throw std::invalid_argument("loss_next_token: targets/mask length must match logits rows");
  std::size_t count = 0;
  Tensor sel = Tensor::zeros(n, v);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= v) throw std::out_of_range("loss_next_token: target outside vocab");
    sel.set(i, targets[i], 1.0);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("loss_next_token: empty mask");
  return scale(sum_all(mul(log_softmax_rows(logits), sel)), -1.0 / static_cast<double>(count));
}

// Greedy answer readout: argmax over the logit row at the last prompt
// position (the row that predicts the answer slot).
inline std::uint32_t predict_token(const ModelState& st,
                                   const std::vector<std::uint32_t>& tokens) {
  TapePause pause;
  Tensor logits = forward(st, tokens);
  std::size_t row = logits.rows() - 1;
  std::uint32_t best = 0;
  double best_val = logits.at(row, 0);
  for (std::size_t j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > best_val) {
      best_val = logits.at(row, j);
      best = static_cast<std::uint32_t>(j);
    }
  return best;
}

// Multiple-choice readout: greedy argmax restricted to the candidate set.
// A random model scores 1/|candidates| in expectation under this readout,
// whereas the unrestricted argmax lands anywhere in the vocab (~1/V).
inline std::uint32_t predict_token_among(const ModelState& st,
                                         const std::vector<std::uint32_t>& tokens,
                                         const std::vector<std::uint32_t>& candidates) {
  if (candidates.empty())
    throw std::invalid_argument("predict_token_among: empty candidate set");
  TapePause pause;
  Tensor logits = forward(st, tokens);
  std::size_t row = logits.rows() - 1;
  std::uint32_t best = candidates.front();
  double best_val = logits.at(row, best);
  for (std::uint32_t c : candidates) {
    if (c >= logits.cols())
      throw std::out_of_range("predict_token_among: candidate outside vocab");
    if (logits.at(row, c) > best_val) {
      best_val = logits.at(row, c);
      best = c;
    }
  }
  return best;
}

}  // namespace ptlab
