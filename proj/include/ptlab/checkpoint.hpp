// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (native little-endian doubles, one platform):
//
//   8 bytes  magic "PTLABCK1"
//   u32      version (currently 1)
//   u64      config JSON length, then that many bytes
//   u64      parameter count
//   repeat:  u32 name length, name bytes, u8 trainable, u64 rows, u64 cols,
//            rows*cols f64 values (row-major)
//
// Parameters are written in the canonical named_params order, making saves
// byte-deterministic for a given state.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "ptlab/model.hpp"

namespace ptlab {

namespace detail {

inline constexpr char kCkptMagic[8] = {'P', 'T', 'L', 'A', 'B', 'C', 'K', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error(path + ": truncated checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelState& st, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod(out, detail::kCkptVersion);
  std::string cfg = st.cfg.to_json().dump();
  detail::write_pod(out, static_cast<std::uint64_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::vector<NamedParam> params = named_params(st);
  detail::write_pod(out, static_cast<std::uint64_t>(params.size()));
  for (const NamedParam& p : params) {
    detail::write_pod(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod(out, static_cast<std::uint8_t>(p.tensor.requires_grad() ? 1 : 0));
    detail::write_pod(out, static_cast<std::uint64_t>(p.tensor.rows()));
    detail::write_pod(out, static_cast<std::uint64_t>(p.tensor.cols()));
    out.write(reinterpret_cast<const char*>(p.tensor.values().data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failure on " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  std::uint32_t version = detail::read_pod<std::uint32_t>(in, path);
  if (version != detail::kCkptVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  std::uint64_t cfg_len = detail::read_pod<std::uint64_t>(in, path);
  std::string cfg_text(cfg_len, '\0');
  if (!in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len)))
    throw std::runtime_error(path + ": truncated checkpoint");
  ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_text));

  // Rebuild the structure from the config, then overwrite values in walk
  // order; any divergence between file and structure is an error.
  ModelState st = init_model(cfg);
  std::vector<NamedParam> params = named_params(st);
  std::uint64_t count = detail::read_pod<std::uint64_t>(in, path);
  if (count != params.size())
    throw std::runtime_error(path + ": parameter count mismatch (file " +
                             std::to_string(count) + ", config implies " +
                             std::to_string(params.size()) + ")");
  for (NamedParam& p : params) {
    std::uint32_t name_len = detail::read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw std::runtime_error(path + ": truncated checkpoint");
    if (name != p.name)
      throw std::runtime_error(path + ": parameter order mismatch (file '" + name +
                               "', expected '" + p.name + "')");
    std::uint8_t trainable = detail::read_pod<std::uint8_t>(in, path);
    std::uint64_t rows = detail::read_pod<std::uint64_t>(in, path);
    std::uint64_t cols = detail::read_pod<std::uint64_t>(in, path);
    if (rows != p.tensor.rows() || cols != p.tensor.cols())
      throw std::runtime_error(path + ": shape mismatch on '" + name + "'");
    if (!in.read(reinterpret_cast<char*>(p.tensor.mutable_values().data()),
                 static_cast<std::streamsize>(rows * cols * sizeof(double))))
      throw std::runtime_error(path + ": truncated checkpoint");
    p.tensor.set_requires_grad(trainable != 0);
  }
  return st;
}

}  // namespace ptlab
