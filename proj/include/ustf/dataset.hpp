#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ustf/skeleton.hpp"

namespace ustf {

// SKEL v1, little-endian:
//   "SKL1" | u32 C | u32 T | u32 V | u32 label | C*T*V float32 in (C, T, V) order
void write_skel(const std::filesystem::path& path, const SkeletonSequence& seq);
SkeletonSequence read_skel(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_skel(const SkeletonSequence& seq);
SkeletonSequence decode_skel(const std::vector<std::uint8_t>& bytes);

/// Graph description as stored in manifests and configs: the string "ntu25"
/// or {"num_joints": V, "edges": [[a, b], ...]}.
nlohmann::json graph_to_json(const SkeletonGraph& graph);
SkeletonGraph graph_from_json(const nlohmann::json& j);

struct DatasetManifest {
  std::uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> files;
  SkeletonGraph graph = ntu_graph();

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SkeletonSequence> sequences;
};

/// Writes every sequence under `dir` plus manifest.json.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Loads manifest.json and every file it lists, checking labels < K and the
/// joint count against the manifest graph.
Dataset load_dataset(const std::filesystem::path& dir);

struct SynthOptions {
  std::uint64_t seed = 0;
  std::uint32_t num_classes = 4;
  std::size_t samples_per_class = 32;
  std::size_t frames = 64;
  double noise_stddev = 0.02;
};

/// Deterministic desk-scale stand-in for a skeleton action dataset.
///
/// Class k animates limb group (k mod 4) with a sinusoid whose cycle count,
/// axis and amplitude are indexed by k / 4, on top of a fixed rest pose.
/// Each sample draws a small phase and amplitude jitter plus i.i.d. Gaussian
/// noise. Samples are ordered class-major.
Dataset synth_dataset(const SynthOptions& options, const SkeletonGraph& graph);

/// Atomic whole-file write (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace ustf
