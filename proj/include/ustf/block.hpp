#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ustf/attention.hpp"
#include "ustf/ops.hpp"
#include "ustf/skeleton.hpp"

namespace ustf {

struct BlockConfig {
  std::size_t in_channels = 64;
  std::size_t out_channels = 64;
  std::size_t kernel_t = 3;
  std::size_t kernel_v = 3;
  std::size_t mlp_hidden = 128;
  double dropout = 0.1;
  std::size_t eca_kernel = 3;
  AttentionVariant variant = AttentionVariant::Combined;
  double alpha_init = 0.5;

  /// Throws ConfigError on odd output width, even kernels or bad dropout.
  void validate() const;
  bool has_residual_projection() const { return in_channels != out_channels; }
};

struct BlockParams {
  Tensor depthwise;      // [Cin, kT, kV]
  Tensor pointwise;      // [C', Cin]
  Tensor pointwise_bias; // [C']
  MSPAttentionParams attention;
  Tensor alpha;          // [1]
  Tensor a_init;         // [V, V]
  Tensor eca_kernel;     // [k]
  Tensor bn_gamma;       // [C']
  Tensor bn_beta;        // [C']
  ops::BatchNormState bn;
  Tensor residual_weight;  // [C', Cin], undefined when Cin == C'
  Tensor residual_bias;    // [C']

  static BlockParams init(const BlockConfig& config, const SkeletonGraph& graph, Rng& rng);

  // Declaration order; alpha, a_init and the BN affine are exempt from
  // weight decay.
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Intermediates of one block_forward call, in evaluation order.
struct BlockTrace {
  Tensor features;   // separable conv output
  Tensor attention;  // dynamic map, rows stochastic
  Tensor fused;      // after topology fusion
  Tensor attended;   // fused map applied per frame
  Tensor refined;    // after channel refinement
  Tensor output;
};

/// M = alpha * A + (1 - alpha) * A_init, A_init broadcast over the batch.
Tensor fuse_topology(const AttentionMap& dynamic, const Tensor& a_init, const Tensor& alpha);

/// out[n,c,t,i] = sum_j f[n,c,t,j] * m[n,i,j], the same map for every frame.
Tensor apply_attention(const Tensor& f, const Tensor& m);

/// 1-D convolution across the channel axis of s[N,C]; odd kernel, zero
/// padding, no bias.
Tensor channel_conv1d(const Tensor& s, const Tensor& kernel);

/// f * (1 + w) with w[N,C] broadcast over (T,V).
Tensor residual_channel_gate(const Tensor& f, const Tensor& w);

/// f + f * sigmoid(conv1d(mean_{T,V} f)).
Tensor channel_refine(const Tensor& f, const Tensor& eca_kernel);

/// relu(BN(refine(apply(fuse(attn(conv(x))), conv(x)))) + R(x)), with R the
/// identity or a 1x1 projection when the channel count changes.
Tensor block_forward(const Tensor& x, BlockParams& params, const ForwardContext& ctx, BlockTrace* trace = nullptr);

}  // namespace ustf
