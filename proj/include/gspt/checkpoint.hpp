#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/transformer.hpp"

namespace gspt {

inline constexpr char kCheckpointMagic[8] = {'G', 'S', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named f32 tensors plus a metadata document. Tensor order is file order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat<float>>> tensors;

  const Mat<float>* find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return &m;
    return nullptr;
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& t : tensors)
      if (t.first.starts_with(prefix)) return true;
    return false;
  }

  template <class P>
  void add(const P& params, const std::string& prefix = "") {
    params.visit([&](const std::string& name, const Mat<float>& m) { tensors.emplace_back(prefix + name, m); });
  }

  /// Copies tensors named `prefix + name` into `params`, which must already
  /// be sized. Missing tensors or shape mismatches throw.
  template <class P>
  void load(P& params, const std::string& prefix = "") const {
    params.visit([&](const std::string& name, Mat<float>& m) {
      const Mat<float>* src = find(prefix + name);
      if (!src) throw DataError("checkpoint: missing tensor " + prefix + name);
      if (src->rows() != m.rows() || src->cols() != m.cols()) throw DataError("checkpoint: shape mismatch for " + prefix + name);
      m = *src;
    });
  }
};

inline nlohmann::json shape_to_json(const ModelShape& s) {
  return {{"hidden_dim", s.dim}, {"n_layers", s.layers}, {"n_heads", s.heads}, {"ffn_dim", s.ffn_dim}, {"max_len", s.max_len}};
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
  try {
    ModelShape s;
    s.dim = j.at("hidden_dim").get<std::size_t>();
    s.layers = j.at("n_layers").get<std::size_t>();
    s.heads = j.at("n_heads").get<std::size_t>();
    s.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    s.max_len = j.at("max_len").get<std::size_t>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad architecture block: ") + e.what());
  }
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json meta = ck.meta;
  meta["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : ck.tensors) meta["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  const std::string doc = meta.dump();
  auto tmp = path;
  tmp += ".tmp";
  {
    auto out = detail::open_out(tmp);
    out.write(kCheckpointMagic, 8);
    detail::write_le(out, kCheckpointVersion);
    detail::write_le(out, static_cast<std::uint64_t>(doc.size()));
    out.write(doc.data(), static_cast<std::streamsize>(doc.size()));
    for (const auto& t : ck.tensors)
      for (Eigen::Index i = 0; i < t.second.size(); ++i) detail::write_le(out, t.second.data()[i]);
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path.string() + ": bad checkpoint magic");
  const auto version = detail::read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::read_le<std::uint64_t>(in, path);
  std::string doc(len, '\0');
  in.read(doc.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated metadata");
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(doc);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": metadata is not valid JSON: " + e.what());
  }
  for (const auto& t : ck.meta.at("tensors")) {
    Mat<float> m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::read_le<float>(in, path);
    ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes after tensors");
  ck.meta.erase("tensors");
  return ck;
}

inline Checkpoint model_checkpoint(const ModelParams<float>& P, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  ck.meta["arch"] = shape_to_json(P.shape);
  ck.add(P, "encoder.");
  return ck;
}

inline ModelParams<float> model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("arch")) throw DataError("checkpoint: no architecture block");
  auto P = ModelParams<float>::zeros(shape_from_json(ck.meta.at("arch")));
  ck.load(P, "encoder.");
  return P;
}

}  // namespace gspt
