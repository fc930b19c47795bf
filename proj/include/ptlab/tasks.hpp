// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic generative-classification tasks. Three generators produce
// token-pattern problems whose gold rule is known in closed form, so a
// perfect classifier exists and observed method gaps cannot be label noise:
//   copy                   — the class token sits right after BOS
//   pattern-classification — one class-specific motif token hides among fillers
//   key-value-recall       — per-example random key->label pairs; the query
//                            key at the end selects which pair to recall
// Datasets are pure functions of their spec (including the seed) and persist
// as line-delimited text with a JSON spec header.

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptlab/rng.hpp"

namespace ptlab {

enum class TaskKind { Copy, PatternClassification, KeyValueRecall };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::PatternClassification: return "pattern-classification";
    case TaskKind::KeyValueRecall: return "key-value-recall";
  }
  throw std::logic_error("unknown task kind");
}

inline TaskKind task_kind_from(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "pattern-classification") return TaskKind::PatternClassification;
  if (s == "key-value-recall") return TaskKind::KeyValueRecall;
  throw std::invalid_argument("unknown task kind: " + s);
}

// Special vocab ids shared by all generators.
inline constexpr std::uint32_t kBos = 0;
inline constexpr std::uint32_t kSep = 1;

struct TaskSpec {
  std::string name = "task";
  TaskKind kind = TaskKind::Copy;
  std::size_t classes = 2;       // C
  std::size_t seq_len = 16;      // prompt length n (answer slot excluded)
  std::size_t vocab = 64;        // V
  std::uint32_t label_base = 0;  // first label token id; 0 = top of vocab
  std::size_t train_per_class = 8;
  std::size_t test_size = 256;  // rounded down to a multiple of C
  std::uint64_t seed = 0;

  std::uint32_t first_label() const {
    return label_base != 0 ? label_base
                           : static_cast<std::uint32_t>(vocab - classes);
  }

  // Class-specific auxiliary tokens (motifs for pattern-classification, keys
  // for key-value-recall): the lowest C non-special ids outside the label
  // range. Derived from the spec alone so the closed-form rule needs no RNG.
  std::vector<std::uint32_t> aux_tokens() const {
    std::vector<std::uint32_t> out;
    std::uint32_t lo = first_label();
    std::uint32_t hi = lo + static_cast<std::uint32_t>(classes);
    for (std::uint32_t t = 2; out.size() < classes && t < vocab; ++t)
      if (t < lo || t >= hi) out.push_back(t);
    return out;
  }

  // Content tokens free of any special meaning.
  std::vector<std::uint32_t> filler_tokens() const {
    std::vector<std::uint32_t> aux = aux_tokens();
    std::uint32_t lo = first_label();
    std::uint32_t hi = lo + static_cast<std::uint32_t>(classes);
    std::vector<std::uint32_t> out;
    for (std::uint32_t t = 2; t < vocab; ++t) {
      if (t >= lo && t < hi) continue;
      bool is_aux = false;
      for (std::uint32_t a : aux)
        if (a == t) is_aux = true;
      if (!is_aux) out.push_back(t);
    }
    return out;
  }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("task needs at least 2 classes");
    std::uint32_t lo = first_label();
    if (lo < 2 || lo + classes > vocab)
      throw std::invalid_argument("label range [" + std::to_string(lo) + ", " +
                                  std::to_string(lo + classes) +
                                  ") does not fit the vocab");
    // specials + labels + aux + at least 4 fillers
    if (vocab < 2 + 2 * classes + 4)
      throw std::invalid_argument("vocab too small for " + std::to_string(classes) +
                                  " classes plus motif tokens");
    std::size_t min_len = kind == TaskKind::KeyValueRecall ? 2 * classes + 3 : 3;
    if (seq_len < min_len)
      throw std::invalid_argument("seq_len " + std::to_string(seq_len) +
                                  " below the generator minimum " +
                                  std::to_string(min_len));
    if (train_per_class == 0) throw std::invalid_argument("empty train pool");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"name", name},
                          {"kind", to_string(kind)},
                          {"classes", classes},
                          {"seq_len", seq_len},
                          {"vocab", vocab},
                          {"label_base", label_base},
                          {"train_per_class", train_per_class},
                          {"test_size", test_size},
                          {"seed", seed}};
  }

  static TaskSpec from_json(const nlohmann::json& j) {
    TaskSpec s;
    s.name = j.at("name").get<std::string>();
    s.kind = task_kind_from(j.at("kind").get<std::string>());
    s.classes = j.at("classes").get<std::size_t>();
    s.seq_len = j.at("seq_len").get<std::size_t>();
    s.vocab = j.at("vocab").get<std::size_t>();
    s.label_base = j.at("label_base").get<std::uint32_t>();
    s.train_per_class = j.at("train_per_class").get<std::size_t>();
    s.test_size = j.at("test_size").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

// The input-length-stressed variant of a task: same rule, 4x the prompt.
inline TaskSpec long_variant(TaskSpec spec) {
  spec.seq_len *= 4;
  spec.name += "-long";
  return spec;
}

struct Example {
  std::vector<std::uint32_t> tokens;  // prompt; the answer slot comes after it
  std::uint32_t label = 0;            // gold answer token
  std::size_t answer_pos = 0;         // index of the answer slot == tokens.size()
};

struct Dataset {
  TaskSpec spec;
  std::vector<Example> train;  // class of example i is i % C (interleaved)
  std::vector<Example> test;   // same interleaving: exactly uniform histogram

  std::vector<std::uint32_t> labels() const {
    std::vector<std::uint32_t> out;
    for (std::size_t c = 0; c < spec.classes; ++c)
      out.push_back(spec.first_label() + static_cast<std::uint32_t>(c));
    return out;
  }
};

namespace detail {

inline Example make_example(const TaskSpec& spec, std::size_t cls, SplitRng& rng) {
  const std::size_t n = spec.seq_len;
  const std::vector<std::uint32_t> aux = spec.aux_tokens();
  const std::vector<std::uint32_t> fill = spec.filler_tokens();
  auto filler = [&] { return fill[rng.below(fill.size())]; };
  Example ex;
  ex.tokens.assign(n, 0);
  ex.tokens[0] = kBos;
  ex.label = spec.first_label() + static_cast<std::uint32_t>(cls);
  switch (spec.kind) {
    case TaskKind::Copy: {
      // the class token itself sits at index 1; everything after is noise
      ex.tokens[1] = ex.label;
      for (std::size_t i = 2; i < n; ++i) ex.tokens[i] = filler();
      break;
    }
    case TaskKind::PatternClassification: {
      for (std::size_t i = 1; i < n; ++i) ex.tokens[i] = filler();
      std::size_t pos = 1 + rng.below(n - 1);
      ex.tokens[pos] = aux[cls];
      break;
    }
    case TaskKind::KeyValueRecall: {
      const std::size_t c = spec.classes;
      // per-example assignment: value of key j is label sigma(j)
      std::vector<std::size_t> sigma(c), order(c);
      for (std::size_t j = 0; j < c; ++j) sigma[j] = order[j] = j;
      for (std::size_t j = c; j > 1; --j) std::swap(sigma[j - 1], sigma[rng.below(j)]);
      for (std::size_t j = c; j > 1; --j) std::swap(order[j - 1], order[rng.below(j)]);
      std::size_t query = 0;  // the key whose value is this example's class
      for (std::size_t j = 0; j < c; ++j)
        if (sigma[j] == cls) query = j;
      std::size_t at = 1;
      for (std::size_t j : order) {
        ex.tokens[at++] = aux[j];
        ex.tokens[at++] = spec.first_label() + static_cast<std::uint32_t>(sigma[j]);
      }
      while (at < n - 2) ex.tokens[at++] = filler();
      ex.tokens[at++] = kSep;
      ex.tokens[at++] = aux[query];
      break;
    }
  }
  ex.answer_pos = ex.tokens.size();
  return ex;
}

}  // namespace detail

// The gold rule each generator was built around. Running it over a dataset
// is the learnability-ceiling check: it must score 100% by construction.
inline std::uint32_t closed_form_predict(const TaskSpec& spec,
                                         const std::vector<std::uint32_t>& tokens) {
  const std::vector<std::uint32_t> aux = spec.aux_tokens();
  switch (spec.kind) {
    case TaskKind::Copy:
      return tokens.at(1);
    case TaskKind::PatternClassification: {
      for (std::uint32_t t : tokens)
        for (std::size_t c = 0; c < aux.size(); ++c)
          if (t == aux[c]) return spec.first_label() + static_cast<std::uint32_t>(c);
      throw std::runtime_error("no motif token present");
    }
    case TaskKind::KeyValueRecall: {
      std::uint32_t query = tokens.back();
      for (std::size_t i = 1; i + 1 < tokens.size(); ++i)
        if (tokens[i] == query) return tokens[i + 1];
      throw std::runtime_error("query key not found in the pair region");
    }
  }
  throw std::logic_error("unknown task kind");
}

inline Dataset generate(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  SplitRng rng(spec.seed, "task-" + spec.name);
  SplitRng train_rng = rng.split("train");
  SplitRng test_rng = rng.split("test");
  for (std::size_t j = 0; j < spec.train_per_class; ++j)
    for (std::size_t c = 0; c < spec.classes; ++c)
      ds.train.push_back(detail::make_example(spec, c, train_rng));
  std::size_t per_class = spec.test_size / spec.classes;
  if (per_class == 0 && spec.test_size > 0) per_class = 1;
  for (std::size_t j = 0; j < per_class; ++j)
    for (std::size_t c = 0; c < spec.classes; ++c)
      ds.test.push_back(detail::make_example(spec, c, test_rng));
  return ds;
}

struct FewShotRound {
  std::size_t round = 0;
  std::vector<std::size_t> example_ids;  // one per class, class order
  std::uint64_t seed = 0;
};

inline FewShotRound sample_round(const Dataset& ds, std::size_t round,
                                 std::uint64_t seed) {
  const std::size_t c = ds.spec.classes;
  FewShotRound out;
  out.round = round;
  out.seed = seed;
  SplitRng rng(seed, "sample-round-" + std::to_string(round));
  for (std::size_t cls = 0; cls < c; ++cls) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      if (ds.train[i].label == ds.spec.first_label() + cls) pool.push_back(i);
    if (pool.empty())
      throw std::runtime_error("empty train pool for class " + std::to_string(cls));
    out.example_ids.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

// Multiple-choice framing for out-of-distribution evaluation: the prompt
// opens with every candidate label, then a separator, then the original
// prompt body (its BOS dropped; the preamble supplies one).
inline Example make_ood_prompt(const Example& ex,
                               const std::vector<std::uint32_t>& label_list,
                               std::uint32_t iid_label_lo, std::uint32_t iid_label_hi) {
  for (std::uint32_t l : label_list)
    if (l >= iid_label_lo && l < iid_label_hi)
      throw std::invalid_argument("label " + std::to_string(l) +
                                  " collides with the in-distribution range");
  Example out;
  out.tokens.push_back(kBos);
  for (std::uint32_t l : label_list) out.tokens.push_back(l);
  out.tokens.push_back(kSep);
  for (std::size_t i = 1; i < ex.tokens.size(); ++i) out.tokens.push_back(ex.tokens[i]);
  out.label = ex.label;
  out.answer_pos = out.tokens.size();
  return out;
}

// --- persistence -----------------------------------------------------------
//
//   #ptlab-dataset v1 <spec json>
//   train <n> <t0> ... <t{n-1}> <label> <mask>
//   test  <n> <t0> ... <t{n-1}> <label> <mask>
//
// The writer is canonical (single spaces, \n), so load followed by persist
// reproduces the file byte for byte.

inline std::string serialize(const Dataset& ds) {
  std::ostringstream out;
  out << "#ptlab-dataset v1 " << ds.spec.to_json().dump() << "\n";
  auto emit = [&](const char* tag, const Example& ex) {
    out << tag << " " << ex.tokens.size();
    for (std::uint32_t t : ex.tokens) out << " " << t;
    out << " " << ex.label << " " << ex.answer_pos << "\n";
  };
  for (const Example& ex : ds.train) emit("train", ex);
  for (const Example& ex : ds.test) emit("test", ex);
  return out.str();
}

inline void persist(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << serialize(ds);
}

inline Dataset deserialize(std::istream& in, const std::string& origin) {
  auto fail = [&](std::size_t line, const std::string& what) {
    throw std::runtime_error(origin + ":" + std::to_string(line) + ": " + what);
  };
  std::string header;
  if (!std::getline(in, header)) fail(1, "missing header line");
  const std::string magic = "#ptlab-dataset v1 ";
  if (header.rfind(magic, 0) != 0)
    fail(1, "bad or mismatched format version (expected '" + magic + "...')");
  Dataset ds;
  try {
    ds.spec = TaskSpec::from_json(nlohmann::json::parse(header.substr(magic.size())));
  } catch (const nlohmann::json::exception& e) {
    fail(1, std::string("spec header does not parse: ") + e.what());
  }
  std::string line;
  for (std::size_t ln = 2; std::getline(in, line); ++ln) {
    if (line.empty()) fail(ln, "blank line");
    std::istringstream row(line);
    std::string split;
    std::size_t n = 0;
    if (!(row >> split >> n)) fail(ln, "malformed record");
    if (split != "train" && split != "test") fail(ln, "unknown split '" + split + "'");
    Example ex;
    ex.tokens.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      if (!(row >> ex.tokens[i])) fail(ln, "truncated token array");
    if (!(row >> ex.label >> ex.answer_pos)) fail(ln, "missing label or mask index");
    std::string extra;
    if (row >> extra) fail(ln, "trailing data '" + extra + "'");
    if (ex.answer_pos > ex.tokens.size()) fail(ln, "mask index beyond the answer slot");
    (split == "train" ? ds.train : ds.test).push_back(std::move(ex));
  }
  return ds;
}

inline Dataset load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return deserialize(f, path);
}

}  // namespace ptlab
