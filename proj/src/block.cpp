#include "ustf/block.hpp"

#include <cmath>

#include "ustf/errors.hpp"

namespace ustf {

void BlockConfig::validate() const {
  if (in_channels == 0 || out_channels == 0) throw ConfigError("block channel counts must be positive");
  if (out_channels % 2 != 0) {
    throw ConfigError("block output width " + std::to_string(out_channels) + " must be even for the Q/K split");
  }
  if (kernel_t % 2 == 0 || kernel_v % 2 == 0) throw ConfigError("depthwise kernel sizes must be odd");
  if (eca_kernel % 2 == 0) throw ConfigError("refinement kernel size must be odd");
  if (mlp_hidden == 0) throw ConfigError("attention MLP hidden width must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout probability must lie in [0, 1)");
  if (!std::isfinite(alpha_init)) throw ConfigError("alpha_init must be finite");
}

BlockParams BlockParams::init(const BlockConfig& config, const SkeletonGraph& graph, Rng& rng) {
  config.validate();
  const std::size_t Cin = config.in_channels, Cout = config.out_channels;
  const std::size_t V = graph.num_joints();
  BlockParams p;
  const double dw_bound = 1.0 / std::sqrt(static_cast<double>(config.kernel_t * config.kernel_v));
  const double pw_bound = 1.0 / std::sqrt(static_cast<double>(Cin));
  p.depthwise = uniform_param({Cin, config.kernel_t, config.kernel_v}, dw_bound, rng);
  p.pointwise = uniform_param({Cout, Cin}, pw_bound, rng);
  p.pointwise_bias = uniform_param({Cout}, pw_bound, rng);
  p.attention = MSPAttentionParams::init(V, config.mlp_hidden, config.dropout, config.variant, rng);
  p.alpha = Tensor::scalar(config.alpha_init, true);
  p.a_init = build_adjacency(graph);
  p.a_init.set_requires_grad(true);
  p.eca_kernel = uniform_param({config.eca_kernel}, 1.0 / std::sqrt(static_cast<double>(config.eca_kernel)), rng);
  p.bn_gamma = Tensor::full({Cout}, 1.0, true);
  p.bn_beta = Tensor::zeros({Cout}, true);
  p.bn = ops::BatchNormState::identity(Cout);
  if (config.has_residual_projection()) {
    p.residual_weight = uniform_param({Cout, Cin}, pw_bound, rng);
    p.residual_bias = uniform_param({Cout}, pw_bound, rng);
  }
  return p;
}

void BlockParams::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".conv.depthwise", depthwise});
  out.push_back({prefix + ".conv.pointwise", pointwise});
  out.push_back({prefix + ".conv.bias", pointwise_bias});
  attention.collect(prefix + ".attn", out);
  out.push_back({prefix + ".alpha", alpha, false});
  out.push_back({prefix + ".a_init", a_init, false});
  out.push_back({prefix + ".eca", eca_kernel});
  out.push_back({prefix + ".bn.gamma", bn_gamma, false});
  out.push_back({prefix + ".bn.beta", bn_beta, false});
  if (residual_weight.defined()) {
    out.push_back({prefix + ".residual.weight", residual_weight});
    out.push_back({prefix + ".residual.bias", residual_bias});
  }
}

void BlockParams::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".bn.running_mean", bn.running_mean, false});
  out.push_back({prefix + ".bn.running_var", bn.running_var, false});
}

Tensor fuse_topology(const AttentionMap& dynamic, const Tensor& a_init, const Tensor& alpha) {
  const Tensor& a = dynamic.values;
  if (a.rank() != 3 || a.dim(1) != a.dim(2)) throw ShapeError("fuse_topology: expected [N,V,V] attention");
  const std::size_t N = a.dim(0), V = a.dim(1);
  if (a_init.shape() != Shape{V, V}) {
    throw ShapeError("fuse_topology: prior " + shape_str(a_init.shape()) + " does not match attention " +
                     shape_str(a.shape()));
  }
  if (alpha.numel() != 1) throw ShapeError("fuse_topology: alpha must be a scalar");
  const double al = alpha.item();
  const auto ad = a.data();
  const auto pd = a_init.data();
  const std::size_t VV = V * V;
  std::vector<double> m(N * VV);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t e = 0; e < VV; ++e) m[n * VV + e] = al * ad[n * VV + e] + (1.0 - al) * pd[e];
  record_flops(3ULL * N * VV);
  return Tensor::from_op("fuse_topology", a.shape(), std::move(m), {a, a_init, alpha}, [N, VV](detail::Node& out) {
    const auto& ad = out.parents[0]->data;
    const auto& pd = out.parents[1]->data;
    const double al = out.parents[2]->data[0];
    const double* g = out.grad.data();
    if (out.parents[0]->requires_grad) {
      auto& ga = out.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < N * VV; ++i) ga[i] += al * g[i];
    }
    if (out.parents[1]->requires_grad) {
      auto& gp = out.parents[1]->grad_buffer();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t e = 0; e < VV; ++e) gp[e] += (1.0 - al) * g[n * VV + e];
    }
    if (out.parents[2]->requires_grad) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t e = 0; e < VV; ++e) acc += g[n * VV + e] * (ad[n * VV + e] - pd[e]);
      out.parents[2]->grad_buffer()[0] += acc;
    }
  });
}

Tensor apply_attention(const Tensor& f, const Tensor& m) {
  if (f.rank() != 4 || m.rank() != 3) throw ShapeError("apply_attention: expected f[N,C,T,V] and m[N,V,V]");
  const std::size_t N = f.dim(0), C = f.dim(1), T = f.dim(2), V = f.dim(3);
  if (m.dim(0) != N || m.dim(1) != V || m.dim(2) != V) {
    throw ShapeError("apply_attention: map " + shape_str(m.shape()) + " does not match features " +
                     shape_str(f.shape()));
  }
  const std::size_t rows = C * T;
  const auto fd = f.data();
  const auto md = m.data();
  std::vector<double> y(f.numel(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double* mp = md.data() + n * V * V;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* fr = fd.data() + (n * rows + r) * V;
      double* yr = y.data() + (n * rows + r) * V;
      for (std::size_t i = 0; i < V; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < V; ++j) acc += fr[j] * mp[i * V + j];
        yr[i] = acc;
      }
    }
  }
  record_flops(2ULL * N * C * T * V * V);
  return Tensor::from_op("apply_attention", f.shape(), std::move(y), {f, m}, [N, rows, V](detail::Node& out) {
    const auto& fd = out.parents[0]->data;
    const auto& md = out.parents[1]->data;
    const double* g = out.grad.data();
    if (out.parents[0]->requires_grad) {
      auto& gf = out.parents[0]->grad_buffer();
      for (std::size_t n = 0; n < N; ++n) {
        const double* mp = md.data() + n * V * V;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g + (n * rows + r) * V;
          double* gfr = gf.data() + (n * rows + r) * V;
          for (std::size_t i = 0; i < V; ++i)
            for (std::size_t j = 0; j < V; ++j) gfr[j] += gr[i] * mp[i * V + j];
        }
      }
    }
    if (out.parents[1]->requires_grad) {
      auto& gm = out.parents[1]->grad_buffer();
      for (std::size_t n = 0; n < N; ++n) {
        double* gmp = gm.data() + n * V * V;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g + (n * rows + r) * V;
          const double* fr = fd.data() + (n * rows + r) * V;
          for (std::size_t i = 0; i < V; ++i)
            for (std::size_t j = 0; j < V; ++j) gmp[i * V + j] += gr[i] * fr[j];
        }
      }
    }
  });
}

Tensor channel_conv1d(const Tensor& s, const Tensor& kernel) {
  if (s.rank() != 2 || kernel.rank() != 1) throw ShapeError("channel_conv1d: expected s[N,C] and kernel[k]");
  const std::size_t N = s.dim(0), C = s.dim(1), k = kernel.dim(0);
  if (k % 2 == 0) throw ShapeError("channel_conv1d: kernel size must be odd");
  const long pad = static_cast<long>(k / 2);
  const auto sd = s.data();
  const auto kd = kernel.data();
  std::vector<double> z(N * C, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (long c = 0; c < static_cast<long>(C); ++c)
      for (long d = 0; d < static_cast<long>(k); ++d) {
        const long src = c + d - pad;
        if (src < 0 || src >= static_cast<long>(C)) continue;
        z[n * C + c] += kd[d] * sd[n * C + src];
      }
  record_flops(2ULL * N * C * k);
  return Tensor::from_op("channel_conv1d", s.shape(), std::move(z), {s, kernel}, [N, C, k, pad](detail::Node& out) {
    const auto& sd = out.parents[0]->data;
    const auto& kd = out.parents[1]->data;
    const bool gs_on = out.parents[0]->requires_grad, gk_on = out.parents[1]->requires_grad;
    std::vector<double>* gs = gs_on ? &out.parents[0]->grad_buffer() : nullptr;
    std::vector<double>* gk = gk_on ? &out.parents[1]->grad_buffer() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (long c = 0; c < static_cast<long>(C); ++c)
        for (long d = 0; d < static_cast<long>(k); ++d) {
          const long src = c + d - pad;
          if (src < 0 || src >= static_cast<long>(C)) continue;
          const double g = out.grad[n * C + c];
          if (gs_on) (*gs)[n * C + src] += g * kd[d];
          if (gk_on) (*gk)[d] += g * sd[n * C + src];
        }
  });
}

Tensor residual_channel_gate(const Tensor& f, const Tensor& w) {
  if (f.rank() != 4 || w.rank() != 2 || w.dim(0) != f.dim(0) || w.dim(1) != f.dim(1)) {
    throw ShapeError("residual_channel_gate: gate " + shape_str(w.shape()) + " does not match " +
                     shape_str(f.shape()));
  }
  const std::size_t NC = f.dim(0) * f.dim(1), S = f.dim(2) * f.dim(3);
  const auto fd = f.data();
  const auto wd = w.data();
  std::vector<double> y(f.numel());
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t s = 0; s < S; ++s) y[nc * S + s] = fd[nc * S + s] * (1.0 + wd[nc]);
  record_flops(2ULL * y.size());
  return Tensor::from_op("residual_channel_gate", f.shape(), std::move(y), {f, w}, [NC, S](detail::Node& out) {
    const auto& fd = out.parents[0]->data;
    const auto& wd = out.parents[1]->data;
    const double* g = out.grad.data();
    if (out.parents[0]->requires_grad) {
      auto& gf = out.parents[0]->grad_buffer();
      for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t s = 0; s < S; ++s) gf[nc * S + s] += g[nc * S + s] * (1.0 + wd[nc]);
    }
    if (out.parents[1]->requires_grad) {
      auto& gw = out.parents[1]->grad_buffer();
      for (std::size_t nc = 0; nc < NC; ++nc) {
        double acc = 0.0;
        for (std::size_t s = 0; s < S; ++s) acc += g[nc * S + s] * fd[nc * S + s];
        gw[nc] += acc;
      }
    }
  });
}

Tensor channel_refine(const Tensor& f, const Tensor& eca_kernel) {
  if (f.rank() != 4) throw ShapeError("channel_refine: expected [N,C,T,V], got " + shape_str(f.shape()));
  Tensor pooled = ops::avg_pool_axes(f, {2, 3});
  Tensor gate = ops::sigmoid(channel_conv1d(pooled, eca_kernel));
  return residual_channel_gate(f, gate);
}

Tensor block_forward(const Tensor& x, BlockParams& params, const ForwardContext& ctx, BlockTrace* trace) {
  if (x.rank() != 4) throw ShapeError("block_forward: expected [N,C,T,V], got " + shape_str(x.shape()));
  if (x.dim(1) != params.depthwise.dim(0)) {
    throw ShapeError("block_forward: input has " + std::to_string(x.dim(1)) + " channels, block expects " +
                     std::to_string(params.depthwise.dim(0)));
  }
  Tensor features = ops::separable_conv2d(x, params.depthwise, params.pointwise, params.pointwise_bias);
  AttentionMap attention = attention_map(features, params.attention, ctx);
  Tensor fused = fuse_topology(attention, params.a_init, params.alpha);
  Tensor attended = apply_attention(features, fused);
  Tensor refined = channel_refine(attended, params.eca_kernel);
  Tensor normed = ops::batchnorm2d(refined, params.bn_gamma, params.bn_beta, params.bn, ctx.mode);
  Tensor residual = params.residual_weight.defined()
                        ? ops::pointwise_conv(x, params.residual_weight, params.residual_bias)
                        : x;
  Tensor output = ops::relu(ops::add(normed, residual));
  if (trace != nullptr) {
    *trace = {features, attention.values, fused, attended, refined, output};
  }
  return output;
}

}  // namespace ustf
