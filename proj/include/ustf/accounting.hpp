#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ustf/model.hpp"

namespace ustf {

// FLOP convention: one multiply-accumulate counts as 2 FLOPs; bias adds
// are folded into their MACs; pooling, softmax, sigmoid, ReLU and the
// outer product count 1 FLOP per output element; batch norm counts 2 per
// element (fused scale and shift); the topology fusion counts 3 per map
// element; dropout, slicing and concatenation count 0.
inline constexpr const char* kFlopConvention =
    "1 MAC = 2 FLOPs (bias adds folded in); pooling/softmax/sigmoid/relu/outer product = 1 FLOP per output "
    "element; batchnorm = 2 FLOPs per element; topology fusion = 3 FLOPs per map element; dropout, slicing and "
    "concatenation = 0; BN running statistics are buffers, excluded from the parameter total";

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t buffers = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_params = 0;
  std::uint64_t total_buffers = 0;
  std::uint64_t total_flops = 0;
  std::size_t frames = 0;
  std::size_t batch = 1;
  ModelConfig config;

  nlohmann::json to_json() const;
  /// One row per layer: name, params, flops, share of each total.
  std::string to_table() const;
};

/// Closed-form parameter and FLOP counts for one forward pass over `batch`
/// samples of `frames` frames.
CostReport profile(const ModelConfig& config, std::size_t frames, std::size_t batch = 1);

/// Parameter columns only (flops zero).
CostReport count_params(const ModelConfig& config);

/// FLOP columns only (params zero).
CostReport count_flops(const ModelConfig& config, std::size_t frames, std::size_t batch = 1);

/// Sum of element counts over every learnable tensor.
std::uint64_t brute_force_param_enumeration(const ModelParams& params);

}  // namespace ustf
