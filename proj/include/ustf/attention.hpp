#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ustf/nn.hpp"

namespace ustf {

// Multi-scale pooling attention: turns a feature map [N,C,T,V] into one
// row-stochastic joint-joint map [N,V,V] per sample.

enum class AttentionVariant { GlobalOnly, LocalOnly, Combined };

std::string to_string(AttentionVariant v);
AttentionVariant attention_variant_from_string(const std::string& s);

// Two-layer perceptron W2 * dropout(relu(W1 x + b1)) + b2.
struct MlpBranch {
  Tensor w1, b1, w2, b2;
};

struct MSPAttentionParams {
  MlpBranch query;
  MlpBranch key;
  std::size_t hidden = 128;
  double dropout_p = 0.1;
  AttentionVariant variant = AttentionVariant::Combined;

  /// Input width of each branch: 2V for the combined descriptor, V otherwise.
  static std::size_t input_width(std::size_t joints, AttentionVariant variant);
  static MSPAttentionParams init(std::size_t joints, std::size_t hidden, double dropout_p,
                                 AttentionVariant variant, Rng& rng);

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct AttentionMap {
  Tensor values;  // [N,V,V], rows sum to one
};

/// Channel halves of f: first C/2 channels become the query source, the rest
/// the key source.
std::pair<Tensor, Tensor> split_qk(const Tensor& f);

/// Mean over channels and frames: [N,C',T,V] -> [N,V].
Tensor pool_global(const Tensor& x);

/// Adaptive 4x4 average pooling over (channel, frame) followed by the mean of
/// the 16 bins: [N,C',T,V] -> [N,V].
Tensor pool_local(const Tensor& x);

/// [global ; local] along the feature axis.
Tensor multi_scale_concat(const Tensor& global, const Tensor& local);

Tensor mlp_project(const Tensor& x, const MlpBranch& branch, double dropout_p, const ForwardContext& ctx);

/// Pooled descriptor of one Q/K half for the given variant: [N,2V] for
/// Combined, [N,V] for the single-scale variants.
Tensor joint_descriptor(const Tensor& half, AttentionVariant variant);

/// softmax(MLP_q(Q_desc) (x) MLP_k(K_desc)) with the variant stored in params.
/// Dropout masks are drawn for the query branch first, then the key branch.
AttentionMap attention_map(const Tensor& f, const MSPAttentionParams& params, const ForwardContext& ctx);

/// Same pipeline with an explicit pooling variant; params must have been
/// initialised for that variant's input width.
AttentionMap variant_attention(const Tensor& f, const MSPAttentionParams& params, AttentionVariant variant,
                               const ForwardContext& ctx);

}  // namespace ustf
