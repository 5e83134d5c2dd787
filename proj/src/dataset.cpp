#include "ustf/dataset.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "ustf/errors.hpp"
#include "ustf/rng.hpp"

namespace ustf {

namespace {

constexpr std::array<char, 4> kSkelMagic{'S', 'K', 'L', '1'};
constexpr std::size_t kSkelHeader = 4 + 4 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw DataError(std::string("SKEL: ") + what + " does not fit in u32");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::vector<std::uint8_t> encode_skel(const SkeletonSequence& seq) {
  if (seq.data.size() != seq.channels * seq.frames * seq.joints) {
    throw DataError("SKEL: sequence payload does not match its dimensions");
  }
  if (seq.frames == 0 || seq.channels == 0 || seq.joints == 0) throw DataError("SKEL: empty dimension");
  std::vector<std::uint8_t> out;
  out.reserve(kSkelHeader + 4 * seq.data.size());
  out.insert(out.end(), kSkelMagic.begin(), kSkelMagic.end());
  put_u32(out, checked_u32(seq.channels, "C"));
  put_u32(out, checked_u32(seq.frames, "T"));
  put_u32(out, checked_u32(seq.joints, "V"));
  put_u32(out, seq.label);
  for (float v : seq.data) {
    if (!std::isfinite(v)) throw DataError("SKEL: refusing to write non-finite value");
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

SkeletonSequence decode_skel(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kSkelMagic.data(), 4) != 0) {
    throw DataError("SKEL: bad magic");
  }
  if (bytes.size() < kSkelHeader) throw DataError("SKEL: truncated header");
  const std::uint8_t* p = bytes.data() + 4;
  const std::uint64_t C = get_u32(p), T = get_u32(p + 4), V = get_u32(p + 8);
  const std::uint32_t label = get_u32(p + 12);
  if (C == 0 || T == 0 || V == 0) throw DataError("SKEL: zero dimension");
  // Each factor is < 2^32, so check the product stepwise against the
  // largest representable payload.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 4;
  if (C > limit / T || C * T > limit / V) throw DataError("SKEL: dimension overflow");
  const std::uint64_t count = C * T * V;
  const std::uint64_t available = bytes.size() - kSkelHeader;
  if (available < count * 4) throw DataError("SKEL: truncated payload");
  if (available > count * 4) throw DataError("SKEL: trailing bytes after payload");
  SkeletonSequence seq(C, T, V, label);
  const std::uint8_t* q = bytes.data() + kSkelHeader;
  for (std::size_t i = 0; i < count; ++i) {
    const float v = std::bit_cast<float>(get_u32(q + 4 * i));
    if (!std::isfinite(v)) throw DataError("SKEL: non-finite value at index " + std::to_string(i));
    seq.data[i] = v;
  }
  return seq;
}

void write_skel(const std::filesystem::path& path, const SkeletonSequence& seq) {
  write_file_atomic(path, encode_skel(seq));
}

SkeletonSequence read_skel(const std::filesystem::path& path) {
  try {
    return decode_skel(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

nlohmann::json graph_to_json(const SkeletonGraph& graph) {
  if (graph == ntu_graph()) return "ntu25";
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : graph.edges()) edges.push_back({a, b});
  return {{"num_joints", graph.num_joints()}, {"edges", edges}};
}

SkeletonGraph graph_from_json(const nlohmann::json& j) {
  try {
    if (j.is_string()) {
      if (j.get<std::string>() == "ntu25") return ntu_graph();
      throw ConfigError("unknown graph name '" + j.get<std::string>() + "'");
    }
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
    return SkeletonGraph(j.at("num_joints").get<std::size_t>(), std::move(edges));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed graph description: ") + e.what());
  } catch (const GraphError& e) {
    throw ConfigError(std::string("invalid graph: ") + e.what());
  }
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"num_classes", num_classes},
          {"class_names", class_names},
          {"files", files},
          {"graph", graph_to_json(graph)}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.num_classes = j.at("num_classes").get<std::uint32_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.files = j.at("files").get<std::vector<std::string>>();
    m.graph = graph_from_json(j.at("graph"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  if (m.num_classes == 0) throw DataError("manifest: num_classes must be positive");
  if (!m.class_names.empty() && m.class_names.size() != m.num_classes) {
    throw DataError("manifest: class_names length does not match num_classes");
  }
  return m;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  if (dataset.manifest.files.size() != dataset.sequences.size()) {
    throw DataError("dataset: file list and sequences differ in length");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < dataset.sequences.size(); ++i) {
    write_skel(dir / dataset.manifest.files[i], dataset.sequences[i]);
  }
  const std::string text = dataset.manifest.to_json().dump(2) + "\n";
  write_file_atomic(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no manifest.json in " + dir.string());
  const auto bytes = read_file(manifest_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.manifest = DatasetManifest::from_json(j);
  ds.sequences.reserve(ds.manifest.files.size());
  for (const auto& f : ds.manifest.files) {
    SkeletonSequence s = read_skel(dir / f);
    if (s.label >= ds.manifest.num_classes) {
      throw DataError(f + ": label " + std::to_string(s.label) + " >= num_classes");
    }
    if (s.joints != ds.manifest.graph.num_joints()) throw DataError(f + ": joint count does not match graph");
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

namespace {

struct Pose {
  std::vector<std::array<double, 3>> rest;
  std::array<std::vector<std::size_t>, 4> groups;
  std::vector<double> weight;  // displacement gain per joint, distal joints larger
};

Pose make_pose(const SkeletonGraph& graph) {
  const std::size_t V = graph.num_joints();
  Pose pose;
  pose.weight.assign(V, 1.0);
  if (graph == ntu_graph()) {
    pose.rest = {{0.0, 0.0, 0.0},     {0.0, 0.3, 0.0},     {0.0, 0.55, 0.0},    {0.0, 0.7, 0.0},
                 {-0.18, 0.5, 0.0},   {-0.28, 0.28, 0.0},  {-0.3, 0.05, 0.0},   {-0.31, -0.02, 0.0},
                 {0.18, 0.5, 0.0},    {0.28, 0.28, 0.0},   {0.3, 0.05, 0.0},    {0.31, -0.02, 0.0},
                 {-0.1, -0.02, 0.0},  {-0.11, -0.42, 0.0}, {-0.12, -0.8, 0.0},  {-0.12, -0.85, 0.08},
                 {0.1, -0.02, 0.0},   {0.11, -0.42, 0.0},  {0.12, -0.8, 0.0},   {0.12, -0.85, 0.08},
                 {0.0, 0.5, 0.0},     {-0.32, -0.08, 0.0}, {-0.29, -0.03, 0.03}, {0.32, -0.08, 0.0},
                 {0.29, -0.03, 0.03}};
    pose.groups = {std::vector<std::size_t>{4, 5, 6, 7, 21, 22}, {8, 9, 10, 11, 23, 24}, {12, 13, 14, 15},
                   {16, 17, 18, 19}};
    const auto parent = graph.parents(0);
    std::vector<double> depth(V, 0.0);
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t u = v; u != parent[u]; u = parent[u]) depth[v] += 1.0;
    }
    for (const auto& g : pose.groups) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t v : g) {
        lo = std::min(lo, depth[v]);
        hi = std::max(hi, depth[v]);
      }
      for (std::size_t v : g) pose.weight[v] = (depth[v] - lo + 1.0) / (hi - lo + 1.0);
    }
    return pose;
  }
  pose.rest.resize(V);
  for (std::size_t v = 0; v < V; ++v) {
    pose.rest[v] = {0.1 * std::cos(2.0 * std::numbers::pi * static_cast<double>(v) / static_cast<double>(V)),
                    0.1 * std::sin(2.0 * std::numbers::pi * static_cast<double>(v) / static_cast<double>(V)), 0.0};
  }
  for (std::size_t v = 1; v < V; ++v) pose.groups[(v - 1) % 4].push_back(v);
  for (auto& g : pose.groups) {
    if (g.empty()) g.push_back(0);
  }
  return pose;
}

}  // namespace

Dataset synth_dataset(const SynthOptions& options, const SkeletonGraph& graph) {
  if (options.num_classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
  if (options.frames < 8) throw ConfigError("synth_dataset: need at least 8 frames");
  if (options.samples_per_class == 0) throw ConfigError("synth_dataset: samples_per_class must be positive");
  static const char* kGroupNames[4] = {"left_arm", "right_arm", "left_leg", "right_leg"};
  static const char* kAxisNames[3] = {"x", "y", "z"};
  const bool named = graph == ntu_graph();
  const Pose pose = make_pose(graph);
  const std::size_t V = graph.num_joints();
  const std::size_t T = options.frames;

  Dataset ds;
  ds.manifest.num_classes = options.num_classes;
  ds.manifest.graph = graph;
  Rng rng(options.seed);
  for (std::uint32_t k = 0; k < options.num_classes; ++k) {
    const std::size_t group = k % 4;
    const std::size_t variant = k / 4;
    const std::size_t axis = variant % 3;
    const double cycles = 1.0 + static_cast<double>(variant);
    const double amplitude = 0.25 * (1.0 + 0.25 * static_cast<double>(variant / 3));
    const std::string gname = named ? kGroupNames[group] : "group" + std::to_string(group);
    ds.manifest.class_names.push_back(gname + "_" + kAxisNames[axis] + "_c" + std::to_string(variant + 1));

    for (std::size_t s = 0; s < options.samples_per_class; ++s) {
      const double phase = rng.uniform(-0.3, 0.3);
      const double gain = rng.uniform(0.9, 1.1);
      SkeletonSequence seq(3, T, V, k);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t t = 0; t < T; ++t) {
          const double wave = std::sin(2.0 * std::numbers::pi * cycles * static_cast<double>(t) /
                                           static_cast<double>(T) +
                                       phase);
          for (std::size_t v = 0; v < V; ++v) seq.at(c, t, v) = static_cast<float>(pose.rest[v][c]);
          if (c == axis) {
            for (std::size_t v : pose.groups[group]) {
              seq.at(c, t, v) += static_cast<float>(amplitude * gain * pose.weight[v] * wave);
            }
          }
        }
      for (float& x : seq.data) x += static_cast<float>(rng.normal(0.0, options.noise_stddev));
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%05zu.skel", ds.sequences.size());
      ds.manifest.files.emplace_back(name);
      ds.sequences.push_back(std::move(seq));
    }
  }
  return ds;
}

}  // namespace ustf
