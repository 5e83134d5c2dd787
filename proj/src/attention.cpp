#include "ustf/attention.hpp"

#include <cmath>

#include "ustf/errors.hpp"
#include "ustf/ops.hpp"

namespace ustf {

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::GlobalOnly:
      return "global_only";
    case AttentionVariant::LocalOnly:
      return "local_only";
    case AttentionVariant::Combined:
      return "combined";
  }
  return "combined";
}

AttentionVariant attention_variant_from_string(const std::string& s) {
  if (s == "global_only") return AttentionVariant::GlobalOnly;
  if (s == "local_only") return AttentionVariant::LocalOnly;
  if (s == "combined") return AttentionVariant::Combined;
  throw ConfigError("unknown attention variant '" + s + "' (expected global_only, local_only or combined)");
}

std::size_t MSPAttentionParams::input_width(std::size_t joints, AttentionVariant variant) {
  return variant == AttentionVariant::Combined ? 2 * joints : joints;
}

namespace {

MlpBranch init_branch(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  MlpBranch br;
  br.w1 = uniform_param({hidden, in}, b1, rng);
  br.b1 = uniform_param({hidden}, b1, rng);
  br.w2 = uniform_param({out, hidden}, b2, rng);
  br.b2 = uniform_param({out}, b2, rng);
  return br;
}

void collect_branch(const std::string& prefix, const MlpBranch& b, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".w1", b.w1});
  out.push_back({prefix + ".b1", b.b1});
  out.push_back({prefix + ".w2", b.w2});
  out.push_back({prefix + ".b2", b.b2});
}

}  // namespace

MSPAttentionParams MSPAttentionParams::init(std::size_t joints, std::size_t hidden, double dropout_p,
                                            AttentionVariant variant, Rng& rng) {
  if (hidden == 0) throw ConfigError("attention MLP hidden width must be positive");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout probability must lie in [0, 1)");
  MSPAttentionParams p;
  p.hidden = hidden;
  p.dropout_p = dropout_p;
  p.variant = variant;
  const std::size_t in = input_width(joints, variant);
  p.query = init_branch(in, hidden, joints, rng);
  p.key = init_branch(in, hidden, joints, rng);
  return p;
}

void MSPAttentionParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  collect_branch(prefix + ".mlp_q", query, out);
  collect_branch(prefix + ".mlp_k", key, out);
}

std::pair<Tensor, Tensor> split_qk(const Tensor& f) {
  if (f.rank() != 4) throw ShapeError("split_qk: expected [N,C,T,V], got " + shape_str(f.shape()));
  const std::size_t C = f.dim(1);
  if (C % 2 != 0) throw ShapeError("split_qk: channel count " + std::to_string(C) + " is odd");
  return {ops::slice_axis(f, 1, 0, C / 2), ops::slice_axis(f, 1, C / 2, C)};
}

Tensor pool_global(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("pool_global: expected [N,C,T,V], got " + shape_str(x.shape()));
  return ops::avg_pool_axes(x, {1, 2});
}

Tensor pool_local(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("pool_local: expected [N,C,T,V], got " + shape_str(x.shape()));
  return ops::avg_pool_axes(ops::adaptive_avg_pool(x, 1, 2, 4, 4), {1, 2});
}

Tensor multi_scale_concat(const Tensor& global, const Tensor& local) {
  if (global.rank() != 2 || global.shape() != local.shape()) {
    throw ShapeError("multi_scale_concat: expected two [N,V] tensors, got " + shape_str(global.shape()) + " and " +
                     shape_str(local.shape()));
  }
  return ops::concat_lastdim(global, local);
}

Tensor mlp_project(const Tensor& x, const MlpBranch& branch, double dropout_p, const ForwardContext& ctx) {
  Tensor h = ops::relu(ops::linear(x, branch.w1, branch.b1));
  if (ctx.mode == Mode::Train && dropout_p > 0.0) {
    if (ctx.rng == nullptr) throw ConfigError("train-mode dropout needs an RNG stream");
    h = ops::dropout(h, dropout_p, ctx.mode, *ctx.rng);
  }
  return ops::linear(h, branch.w2, branch.b2);
}

Tensor joint_descriptor(const Tensor& half, AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::GlobalOnly:
      return pool_global(half);
    case AttentionVariant::LocalOnly:
      return pool_local(half);
    case AttentionVariant::Combined:
      break;
  }
  return multi_scale_concat(pool_global(half), pool_local(half));
}

AttentionMap variant_attention(const Tensor& f, const MSPAttentionParams& params, AttentionVariant variant,
                               const ForwardContext& ctx) {
  const auto [q, k] = split_qk(f);
  const std::size_t V = f.dim(3);
  const std::size_t width = MSPAttentionParams::input_width(V, variant);
  if (params.query.w1.dim(1) != width || params.key.w1.dim(1) != width || params.query.w2.dim(0) != V) {
    throw ShapeError("attention: MLP weights do not match variant " + to_string(variant) + " with V=" +
                     std::to_string(V));
  }
  Tensor qp = mlp_project(joint_descriptor(q, variant), params.query, params.dropout_p, ctx);
  Tensor kp = mlp_project(joint_descriptor(k, variant), params.key, params.dropout_p, ctx);
  return {ops::softmax_lastdim(ops::batched_outer(qp, kp))};
}

AttentionMap attention_map(const Tensor& f, const MSPAttentionParams& params, const ForwardContext& ctx) {
  return variant_attention(f, params, params.variant, ctx);
}

}  // namespace ustf
