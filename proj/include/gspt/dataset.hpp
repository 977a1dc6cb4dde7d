#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gspt/error.hpp"
#include "gspt/graph.hpp"

namespace gspt {

enum class Split : std::uint8_t { none, train, valid, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    default: return "none";
  }
}

/// Graph plus node features and the optional supervision used by downstream
/// evaluation. Labels use -1 for unlabeled nodes.
struct Dataset {
  Graph graph;
  FeatureMatrix features;
  std::vector<std::int32_t> labels;  // empty when the dataset has no labels
  std::vector<Split> splits;         // empty when the dataset has no splits
  std::optional<FeatureMatrix> class_desc;

  std::size_t num_nodes() const noexcept { return graph.num_nodes(); }
  std::size_t dim() const noexcept { return features.cols(); }
  bool has_labels() const noexcept { return !labels.empty(); }

  std::size_t num_classes() const noexcept {
    std::int32_t c = -1;
    for (auto l : labels) c = std::max(c, l);
    return static_cast<std::size_t>(c + 1);
  }
};

namespace detail {

inline constexpr char kFeatureMagic[8] = {'G', 'S', 'P', 'T', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const std::string& what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("truncated " + what);
  return value;
}

inline std::ifstream open_in(const std::filesystem::path& p, std::ios::openmode mode = std::ios::in) {
  std::ifstream is(p, mode);
  if (!is) throw DataError("missing file: " + p.string());
  return is;
}

inline std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(p, mode | std::ios::trunc);
  if (!os) throw DataError("cannot write file: " + p.string());
  return os;
}

/// Splits a TSV line into whitespace-separated fields.
inline std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string f;
  while (ss >> f) out.push_back(f);
  return out;
}

inline std::uint64_t parse_id(const std::string& s, const std::string& where) {
  std::uint64_t v = 0;
  std::size_t used = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    throw DataError("bad integer '" + s + "' in " + where);
  }
  if (used != s.size() || s.front() == '-') throw DataError("bad integer '" + s + "' in " + where);
  return v;
}

/// Calls fn(fields, line_no) for each non-empty, non-comment line.
template <class Fn>
void for_each_record(const std::filesystem::path& p, Fn&& fn) {
  auto is = open_in(p);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto f = fields(line);
    if (f.empty()) continue;
    fn(f, line_no);
  }
}

}  // namespace detail

/// Reads a features.bin-format matrix: "GSPTFEAT", u32 version, u64 rows,
/// u64 cols, then rows*cols little-endian f32.
inline FeatureMatrix read_feature_file(const std::filesystem::path& p) {
  auto is = detail::open_in(p, std::ios::binary);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kFeatureMagic, 8) != 0)
    throw DataError("bad magic in " + p.string());
  if (detail::read_le<std::uint32_t>(is, p.string()) != detail::kFeatureVersion)
    throw DataError("unsupported version in " + p.string());
  const auto n = detail::read_le<std::uint64_t>(is, p.string());
  const auto d = detail::read_le<std::uint64_t>(is, p.string());
  if (d == 0) throw DataError("zero feature dimension in " + p.string());
  std::vector<float> data(n * d);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
    throw DataError("truncated feature payload in " + p.string());
  FeatureMatrix m(n, d, std::move(data));
  if (!m.all_finite()) throw DataError("non-finite feature value in " + p.string());
  return m;
}

inline void write_feature_file(const std::filesystem::path& p, const FeatureMatrix& m) {
  auto os = detail::open_out(p, std::ios::binary);
  os.write(detail::kFeatureMagic, 8);
  detail::write_le<std::uint32_t>(os, detail::kFeatureVersion);
  detail::write_le<std::uint64_t>(os, m.rows());
  detail::write_le<std::uint64_t>(os, m.cols());
  os.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.data().size() * sizeof(float)));
  if (!os) throw DataError("write failed: " + p.string());
}

/// Loads a dataset directory: features.bin and edges.tsv are required;
/// labels.tsv, splits.tsv and class_desc.bin are optional.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.features = read_feature_file(dir / "features.bin");
  const std::size_t n = ds.features.rows();

  std::vector<std::pair<NodeId, NodeId>> edges;
  detail::for_each_record(dir / "edges.tsv", [&](const auto& f, std::size_t line) {
    const std::string where = "edges.tsv:" + std::to_string(line);
    if (f.size() != 2) throw DataError("expected 'u<TAB>v' at " + where);
    const auto u = detail::parse_id(f[0], where);
    const auto v = detail::parse_id(f[1], where);
    if (u >= n || v >= n) throw DataError("node id out of range at " + where);
    edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
  });
  ds.graph = Graph::from_edges(n, edges);

  if (fs::exists(dir / "labels.tsv")) {
    ds.labels.assign(n, -1);
    std::size_t count = 0;
    detail::for_each_record(dir / "labels.tsv", [&](const auto& f, std::size_t line) {
      const std::string where = "labels.tsv:" + std::to_string(line);
      if (f.size() != 2) throw DataError("expected 'node<TAB>class' at " + where);
      const auto u = detail::parse_id(f[0], where);
      if (++count > n || u >= n) throw DataError("label/node count mismatch at " + where);
      ds.labels[u] = static_cast<std::int32_t>(detail::parse_id(f[1], where));
    });
    std::vector<bool> seen(ds.num_classes(), false);
    for (auto l : ds.labels)
      if (l >= 0) seen[static_cast<std::size_t>(l)] = true;
    for (std::size_t c = 0; c < seen.size(); ++c)
      if (!seen[c]) throw DataError("label id gap: class " + std::to_string(c) + " has no nodes");
  }

  if (fs::exists(dir / "splits.tsv")) {
    ds.splits.assign(n, Split::none);
    detail::for_each_record(dir / "splits.tsv", [&](const auto& f, std::size_t line) {
      const std::string where = "splits.tsv:" + std::to_string(line);
      if (f.size() != 2) throw DataError("expected 'node<TAB>split' at " + where);
      const auto u = detail::parse_id(f[0], where);
      if (u >= n) throw DataError("node id out of range at " + where);
      Split s = f[1] == "train" ? Split::train : f[1] == "valid" ? Split::valid : f[1] == "test" ? Split::test : Split::none;
      if (s == Split::none) throw DataError("unknown split '" + f[1] + "' at " + where);
      if (ds.splits[u] != Split::none && ds.splits[u] != s) throw DataError("node in two splits at " + where);
      ds.splits[u] = s;
    });
  }

  if (fs::exists(dir / "class_desc.bin")) {
    ds.class_desc = read_feature_file(dir / "class_desc.bin");
    if (ds.class_desc->cols() != ds.dim()) throw DataError("class_desc dimension differs from features");
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_feature_file(dir / "features.bin", ds.features);
  {
    auto os = detail::open_out(dir / "edges.tsv");
    for (auto [u, v] : ds.graph.edge_list()) os << u << '\t' << v << '\n';
  }
  if (ds.has_labels()) {
    auto os = detail::open_out(dir / "labels.tsv");
    for (std::size_t u = 0; u < ds.labels.size(); ++u)
      if (ds.labels[u] >= 0) os << u << '\t' << ds.labels[u] << '\n';
  }
  if (!ds.splits.empty()) {
    auto os = detail::open_out(dir / "splits.tsv");
    for (std::size_t u = 0; u < ds.splits.size(); ++u)
      if (ds.splits[u] != Split::none) os << u << '\t' << split_name(ds.splits[u]) << '\n';
  }
  if (ds.class_desc) write_feature_file(dir / "class_desc.bin", *ds.class_desc);
}

}  // namespace gspt
