#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "ustf/block.hpp"

namespace ustf {

struct ModelConfig {
  SkeletonGraph graph = ntu_graph();
  std::size_t in_channels = 3;
  std::uint32_t num_classes = 60;
  std::size_t embed_dim = 64;
  std::vector<std::size_t> channel_schedule{64, 64, 64, 64, 128, 128, 128, 256, 256, 256};
  std::size_t kernel_t = 3;
  std::size_t kernel_v = 3;
  std::size_t mlp_hidden = 128;
  double dropout = 0.1;
  std::size_t eca_kernel = 3;
  AttentionVariant variant = AttentionVariant::Combined;
  bool joint_embedding = true;
  double alpha_init = 0.5;

  /// Ten blocks, widths 64/128/256, NTU graph, 60 classes.
  static ModelConfig standard();
  /// Two blocks of width 16 on the NTU graph with 4 classes.
  static ModelConfig tiny();

  void validate() const;
  std::vector<BlockConfig> block_configs() const;
  std::size_t num_joints() const { return graph.num_joints(); }

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base);
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  Tensor embed_weight;  // [E, C_in]
  Tensor embed_bias;    // [E]
  Tensor joint_embed;   // [E, V], undefined when joint embedding is disabled
  std::vector<BlockParams> blocks;
  Tensor head_weight;   // [K, C'_last]
  Tensor head_bias;     // [K]

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> buffers() const;
};

struct Model {
  ModelConfig config;
  ModelParams params;

  static Model create(const ModelConfig& config, std::uint64_t seed);
};

/// x[N,E,T,V] + e[E,V] broadcast over N and T.
Tensor add_joint_embedding(const Tensor& x, const Tensor& embedding);

/// 1x1 lift of the input coordinates plus the additive joint embedding.
Tensor embed(const Tensor& x, const ModelParams& params);

/// Logits [N,K]. `traces`, when given, receives one entry per block.
Tensor forward(const Tensor& x, Model& model, const ForwardContext& ctx,
               std::vector<BlockTrace>* traces = nullptr);

/// Argmax of each logit row; ties go to the lowest index.
std::vector<std::uint32_t> argmax_rows(const Tensor& logits);

/// Eval-mode forward without gradient recording, then argmax_rows.
std::vector<std::uint32_t> predict(const Tensor& x, Model& model);

// Checkpoint, little-endian:
//   "USTF" | u32 version | u32 n | n bytes UTF-8 JSON config |
//   per tensor (parameters, then BN running statistics, in declaration
//   order): u32 rank | u32 dims... | float32 payload
void save_params(const std::filesystem::path& path, const Model& model);
std::vector<std::uint8_t> encode_checkpoint(const Model& model);

/// Loads a checkpoint. When `expected` is given the embedded config must
/// match it exactly (ConfigError otherwise). Corrupt input raises DataError.
Model load_params(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const ModelConfig* expected = nullptr);

}  // namespace ustf
