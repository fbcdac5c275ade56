//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "retro/autodiff.hpp"

namespace retro::io {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

/// Checksum of a file's bytes; used to key artifacts to their inputs.
inline std::uint64_t checksum_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t h = kFnvOffset;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

inline std::string checksum_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_checksum_hex(const std::filesystem::path& path) {
  return checksum_hex(checksum_file(path));
}

namespace detail {

inline constexpr char kMagic[4] = {'R', 'T', 'P', 'B'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated parameter file " + path);
}

}  // namespace detail

/// Writes named parameter tensors to one binary blob. The companion
/// loader restores by name with strict shape checking, so checkpoints
/// survive refactors only if parameter names stay stable.
inline void save_params(const std::filesystem::path& path,
                        const std::vector<const ad::Param*>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(detail::kMagic, 4);
  detail::write_pod(out, detail::kVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::write_pod(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_pod(out, static_cast<std::uint64_t>(p->value.rows()));
    detail::write_pod(out, static_cast<std::uint64_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j)
        detail::write_pod(out, p->value(i, j));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline void save_params(const std::filesystem::path& path,
                        const std::vector<ad::Param*>& params) {
  std::vector<const ad::Param*> view(params.begin(), params.end());
  save_params(path, view);
}

/// Restores parameter values in place. Every parameter must be present in
/// the file with its exact shape, and the file must contain nothing else.
inline void load_params(const std::filesystem::path& path,
                        const std::vector<ad::Param*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kMagic, 4) != 0)
    throw std::runtime_error("not a parameter file: " + path.string());
  std::uint32_t version = 0, count = 0;
  detail::read_pod(in, version, path.string());
  if (version != detail::kVersion)
    throw std::runtime_error("unsupported parameter file version in " +
                             path.string());
  detail::read_pod(in, count, path.string());

  std::map<std::string, Matrix> stored;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint32_t name_len = 0;
    detail::read_pod(in, name_len, path.string());
    if (name_len > 4096)
      throw std::runtime_error("corrupt parameter file " + path.string());
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint64_t rows = 0, cols = 0;
    detail::read_pod(in, rows, path.string());
    detail::read_pod(in, cols, path.string());
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        detail::read_pod(in, m(i, j), path.string());
    if (!stored.emplace(name, std::move(m)).second)
      throw std::runtime_error("duplicate parameter " + name + " in " +
                               path.string());
  }

  if (stored.size() != params.size())
    throw std::runtime_error(
        path.string() + " holds " + std::to_string(stored.size()) +
        " tensors but the model expects " + std::to_string(params.size()));
  for (auto* p : params) {
    const auto it = stored.find(p->name);
    if (it == stored.end())
      throw std::runtime_error("parameter " + p->name + " missing from " +
                               path.string());
    if (it->second.rows() != p->value.rows() ||
        it->second.cols() != p->value.cols())
      throw std::runtime_error("parameter " + p->name + " in " +
                               path.string() + " has the wrong shape");
    p->value = it->second;
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw std::runtime_error("invalid JSON in " + path.string());
  return j;
}

inline void write_json(const std::filesystem::path& path,
                       const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace retro::io
