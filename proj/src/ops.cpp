#include "ustf/ops.hpp"

#include <algorithm>
#include <cmath>

#include "ustf/errors.hpp"

namespace ustf::ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

bool wants(const detail::Node& out, std::size_t i) { return out.parents[i]->requires_grad; }
std::vector<double>& gbuf(detail::Node& out, std::size_t i) { return out.parents[i]->grad_buffer(); }

thread_local KinkMonitor* g_kink_monitor = nullptr;

}  // namespace

KinkMonitor::KinkMonitor() : hash_(0xcbf29ce484222325ULL), outer_(g_kink_monitor) {
  g_kink_monitor = this;
}
KinkMonitor::~KinkMonitor() { g_kink_monitor = outer_; }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> y(ad.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] + bd[i];
  record_flops(y.size());
  return Tensor::from_op("add", a.shape(), std::move(y), {a, b}, [](detail::Node& out) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(out, p)) continue;
      auto& g = gbuf(out, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> y(ad.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] * bd[i];
  record_flops(y.size());
  return Tensor::from_op("mul", a.shape(), std::move(y), {a, b}, [](detail::Node& out) {
    const auto& ad = out.parents[0]->data;
    const auto& bd = out.parents[1]->data;
    if (wants(out, 0)) {
      auto& g = gbuf(out, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bd[i];
    }
    if (wants(out, 1)) {
      auto& g = gbuf(out, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * factor;
  record_flops(y.size());
  return Tensor::from_op("scale", x.shape(), std::move(y), {x}, [factor](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * factor;
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  record_flops(x.numel());
  return Tensor::from_op("sum", {1}, {s}, {x}, [](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (double& v : g) v += out.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor pointwise_unary(const Tensor& x, Unary kind) {
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  if (kind == Unary::Relu) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    for (KinkMonitor* k = g_kink_monitor; k != nullptr; k = k->outer_) {
      for (double v : xd) k->hash_ = (k->hash_ ^ (v > 0.0 ? 1u : 0u)) * 0x100000001b3ULL;
    }
  } else {
    // Branch on sign so exp never overflows.
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double v = xd[i];
      if (v >= 0.0) {
        y[i] = 1.0 / (1.0 + std::exp(-v));
      } else {
        const double e = std::exp(v);
        y[i] = e / (1.0 + e);
      }
    }
  }
  record_flops(y.size());
  const char* name = kind == Unary::Relu ? "relu" : "sigmoid";
  return Tensor::from_op(name, x.shape(), std::move(y), {x}, [kind](detail::Node& out) {
    auto& g = gbuf(out, 0);
    if (kind == Unary::Relu) {
      const auto& xd = out.parents[0]->data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xd[i] > 0.0) g[i] += out.grad[i];
      }
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = out.data[i];
        g[i] += out.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel) {
  require_rank(x, 4, "depthwise_conv2d");
  require_rank(kernel, 3, "depthwise_conv2d kernel");
  const std::size_t N = x.dim(0), C = x.dim(1), T = x.dim(2), V = x.dim(3);
  const std::size_t kT = kernel.dim(1), kV = kernel.dim(2);
  if (kernel.dim(0) != C) {
    throw ShapeError("depthwise_conv2d: kernel has " + std::to_string(kernel.dim(0)) +
                     " channels, input has " + std::to_string(C));
  }
  if (kT % 2 == 0 || kV % 2 == 0) {
    throw ShapeError("depthwise_conv2d: kernel sizes must be odd, got " + shape_str(kernel.shape()));
  }
  const long pT = static_cast<long>(kT / 2), pV = static_cast<long>(kV / 2);
  const long iT = static_cast<long>(T), iV = static_cast<long>(V);
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<double> y(x.numel(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xp = xd.data() + (n * C + c) * T * V;
      const double* kp = kd.data() + c * kT * kV;
      double* yp = y.data() + (n * C + c) * T * V;
      for (long t = 0; t < iT; ++t) {
        for (long dt = 0; dt < static_cast<long>(kT); ++dt) {
          const long st = t + dt - pT;
          if (st < 0 || st >= iT) continue;
          for (long dv = 0; dv < static_cast<long>(kV); ++dv) {
            const double w = kp[dt * kV + dv];
            const long lo = std::max(0L, pV - dv);
            const long hi = std::min(iV, iV + pV - dv);
            const double* xrow = xp + st * V + (dv - pV);
            double* yrow = yp + t * V;
            for (long v = lo; v < hi; ++v) yrow[v] += w * xrow[v];
          }
        }
      }
    }
  }
  record_flops(2ULL * N * C * T * V * kT * kV);
  return Tensor::from_op(
      "depthwise_conv2d", x.shape(), std::move(y), {x, kernel},
      [N, C, T, V, kT, kV, pT, pV](detail::Node& out) {
        const auto& xd = out.parents[0]->data;
        const auto& kd = out.parents[1]->data;
        const bool gx_on = wants(out, 0), gk_on = wants(out, 1);
        std::vector<double>* gx = gx_on ? &gbuf(out, 0) : nullptr;
        std::vector<double>* gk = gk_on ? &gbuf(out, 1) : nullptr;
        const long iT = static_cast<long>(T), iV = static_cast<long>(V);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * T * V;
            const double* gy = out.grad.data() + base;
            for (long t = 0; t < iT; ++t) {
              for (long dt = 0; dt < static_cast<long>(kT); ++dt) {
                const long st = t + dt - pT;
                if (st < 0 || st >= iT) continue;
                for (long dv = 0; dv < static_cast<long>(kV); ++dv) {
                  const std::size_t kidx = c * kT * kV + dt * kV + dv;
                  const long lo = std::max(0L, pV - dv);
                  const long hi = std::min(iV, iV + pV - dv);
                  const std::size_t src = base + st * V + (dv - pV);
                  double acc = 0.0;
                  for (long v = lo; v < hi; ++v) {
                    const double g = gy[t * V + v];
                    if (gx_on) (*gx)[src + v] += g * kd[kidx];
                    acc += g * xd[src + v];
                  }
                  if (gk_on) (*gk)[kidx] += acc;
                }
              }
            }
          }
        }
      });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 4, "pointwise_conv");
  require_rank(weight, 2, "pointwise_conv weight");
  const std::size_t N = x.dim(0), Cin = x.dim(1), T = x.dim(2), V = x.dim(3);
  const std::size_t Cout = weight.dim(0);
  if (weight.dim(1) != Cin) {
    throw ShapeError("pointwise_conv: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Cout}) {
    throw ShapeError("pointwise_conv: bias must have shape [" + std::to_string(Cout) + "]");
  }
  const std::size_t S = T * V;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> y(N * Cout * S, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < Cout; ++o) {
      double* yp = y.data() + (n * Cout + o) * S;
      if (has_bias) std::fill(yp, yp + S, bias.data()[o]);
      for (std::size_t i = 0; i < Cin; ++i) {
        const double w = wd[o * Cin + i];
        const double* xp = xd.data() + (n * Cin + i) * S;
        for (std::size_t s = 0; s < S; ++s) yp[s] += w * xp[s];
      }
    }
  }
  record_flops(2ULL * N * S * Cin * Cout);
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Tensor::from_op(
      "pointwise_conv", {N, Cout, T, V}, std::move(y), inputs,
      [N, Cin, Cout, S, has_bias](detail::Node& out) {
        const auto& xd = out.parents[0]->data;
        const auto& wd = out.parents[1]->data;
        const double* gy = out.grad.data();
        if (wants(out, 0)) {
          auto& gx = gbuf(out, 0);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Cout; ++o)
              for (std::size_t i = 0; i < Cin; ++i) {
                const double w = wd[o * Cin + i];
                const double* g = gy + (n * Cout + o) * S;
                double* gxp = gx.data() + (n * Cin + i) * S;
                for (std::size_t s = 0; s < S; ++s) gxp[s] += w * g[s];
              }
        }
        if (wants(out, 1)) {
          auto& gw = gbuf(out, 1);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Cout; ++o)
              for (std::size_t i = 0; i < Cin; ++i) {
                const double* g = gy + (n * Cout + o) * S;
                const double* xp = xd.data() + (n * Cin + i) * S;
                double acc = 0.0;
                for (std::size_t s = 0; s < S; ++s) acc += g[s] * xp[s];
                gw[o * Cin + i] += acc;
              }
        }
        if (has_bias && wants(out, 2)) {
          auto& gb = gbuf(out, 2);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Cout; ++o) {
              const double* g = gy + (n * Cout + o) * S;
              double acc = 0.0;
              for (std::size_t s = 0; s < S; ++s) acc += g[s];
              gb[o] += acc;
            }
        }
      });
}

Tensor separable_conv2d(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise,
                        const Tensor& bias) {
  return pointwise_conv(depthwise_conv2d(x, depthwise), pointwise, bias);
}

Tensor avg_pool_axes(const Tensor& x, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError("avg_pool_axes: empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  const Shape& in = x.shape();
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t a : axes) {
    if (a >= in.size()) {
      throw ShapeError("avg_pool_axes: axis " + std::to_string(a) + " out of range for " + shape_str(in));
    }
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduced[d]) {
      count *= in[d];
    } else {
      out_shape.push_back(in[d]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Output stride contributed by each input axis (0 for reduced axes).
  std::vector<std::size_t> ostride(in.size(), 0);
  {
    std::size_t s = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (!reduced[d]) {
        ostride[d] = s;
        s *= in[d];
      }
    }
  }
  auto target = std::make_shared<std::vector<std::size_t>>(x.numel());
  {
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t o = 0;
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
      (*target)[flat] = o;
      for (std::size_t d = in.size(); d-- > 0;) {
        ++idx[d];
        o += ostride[d];
        if (idx[d] < in[d]) break;
        o -= ostride[d] * in[d];
        idx[d] = 0;
      }
    }
  }
  const auto xd = x.data();
  std::vector<double> y(shape_numel(out_shape), 0.0);
  for (std::size_t i = 0; i < xd.size(); ++i) y[(*target)[i]] += xd[i];
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : y) v *= inv;
  record_flops(y.size());
  return Tensor::from_op("avg_pool_axes", out_shape, std::move(y), {x}, [target, inv](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[(*target)[i]] * inv;
  });
}

Bin adaptive_bin(std::size_t index, std::size_t length, std::size_t bins) {
  const std::size_t start = index * length / bins;
  std::size_t end = (index + 1) * length / bins;
  if (end <= start) end = start + 1;
  return {start, end};
}

Tensor adaptive_avg_pool(const Tensor& x, std::size_t axis_a, std::size_t axis_b, std::size_t out_a,
                         std::size_t out_b) {
  const Shape& in = x.shape();
  if (axis_a >= axis_b || axis_b >= in.size()) {
    throw ShapeError("adaptive_avg_pool: need axis_a < axis_b < rank, got " + std::to_string(axis_a) + "," +
                     std::to_string(axis_b) + " for " + shape_str(in));
  }
  if (out_a == 0 || out_b == 0) throw ShapeError("adaptive_avg_pool: output sizes must be positive");
  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t d = 0; d < axis_a; ++d) outer *= in[d];
  for (std::size_t d = axis_a + 1; d < axis_b; ++d) mid *= in[d];
  for (std::size_t d = axis_b + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t La = in[axis_a], Lb = in[axis_b];
  Shape out_shape = in;
  out_shape[axis_a] = out_a;
  out_shape[axis_b] = out_b;

  std::vector<Bin> bins_a(out_a), bins_b(out_b);
  for (std::size_t i = 0; i < out_a; ++i) bins_a[i] = adaptive_bin(i, La, out_a);
  for (std::size_t j = 0; j < out_b; ++j) bins_b[j] = adaptive_bin(j, Lb, out_b);

  auto in_index = [=](std::size_t o, std::size_t p, std::size_t m, std::size_t q, std::size_t r) {
    return (((o * La + p) * mid + m) * Lb + q) * inner + r;
  };
  auto out_index = [=](std::size_t o, std::size_t i, std::size_t m, std::size_t j, std::size_t r) {
    return (((o * out_a + i) * mid + m) * out_b + j) * inner + r;
  };

  const auto xd = x.data();
  std::vector<double> y(shape_numel(out_shape), 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < out_a; ++i)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t j = 0; j < out_b; ++j) {
          const Bin ba = bins_a[i], bb = bins_b[j];
          const double inv = 1.0 / static_cast<double>((ba.end - ba.start) * (bb.end - bb.start));
          for (std::size_t r = 0; r < inner; ++r) {
            double acc = 0.0;
            for (std::size_t p = ba.start; p < ba.end; ++p)
              for (std::size_t q = bb.start; q < bb.end; ++q) acc += xd[in_index(o, p, m, q, r)];
            y[out_index(o, i, m, j, r)] = acc * inv;
          }
        }
  record_flops(y.size());
  return Tensor::from_op(
      "adaptive_avg_pool", out_shape, std::move(y), {x},
      [=](detail::Node& out) {
        auto& g = gbuf(out, 0);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < out_a; ++i)
            for (std::size_t m = 0; m < mid; ++m)
              for (std::size_t j = 0; j < out_b; ++j) {
                const Bin ba = bins_a[i], bb = bins_b[j];
                const double inv = 1.0 / static_cast<double>((ba.end - ba.start) * (bb.end - bb.start));
                for (std::size_t r = 0; r < inner; ++r) {
                  const double gv = out.grad[out_index(o, i, m, j, r)] * inv;
                  for (std::size_t p = ba.start; p < ba.end; ++p)
                    for (std::size_t q = bb.start; q < bb.end; ++q) g[in_index(o, p, m, q, r)] += gv;
                }
              }
      });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: rank-0 input");
  const std::size_t L = x.shape().back();
  const std::size_t rows = x.numel() / L;
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xp = xd.data() + r * L;
    double* yp = y.data() + r * L;
    const double m = *std::max_element(xp, xp + L);
    double z = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      yp[i] = std::exp(xp[i] - m);
      z += yp[i];
    }
    for (std::size_t i = 0; i < L; ++i) yp[i] /= z;
  }
  record_flops(y.size());
  return Tensor::from_op("softmax_lastdim", x.shape(), std::move(y), {x}, [rows, L](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yp = out.data.data() + r * L;
      const double* gy = out.grad.data() + r * L;
      double dot = 0.0;
      for (std::size_t i = 0; i < L; ++i) dot += gy[i] * yp[i];
      for (std::size_t i = 0; i < L; ++i) g[r * L + i] += yp[i] * (gy[i] - dot);
    }
  });
}

BatchNormState BatchNormState::identity(std::size_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   Mode mode) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || state.running_mean.shape() != Shape{C} ||
      state.running_var.shape() != Shape{C}) {
    throw ShapeError("batchnorm2d: parameters must have shape [" + std::to_string(C) + "]");
  }
  const std::size_t M = N * S;
  if (mode == Mode::Train && M < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 elements per channel");
  }
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> mean(C), invstd(C);
  if (mode == Mode::Train) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xd.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xd.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + state.eps);
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * ss / static_cast<double>(M - 1);
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + state.eps);
    }
  }
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  std::vector<double> y(xd.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double h = (xd[base + i] - mean[c]) * invstd[c];
        (*xhat)[base + i] = h;
        y[base + i] = gd[c] * h + bd[c];
      }
    }
  record_flops(2ULL * y.size());
  const bool train = mode == Mode::Train;
  return Tensor::from_op(
      "batchnorm2d", x.shape(), std::move(y), {x, gamma, beta},
      [N, C, S, M, train, xhat, invstd](detail::Node& out) {
        const auto& gd = out.parents[1]->data;
        const double* gy = out.grad.data();
        if (wants(out, 1) || wants(out, 2)) {
          std::vector<double> dg(C, 0.0), db(C, 0.0);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t base = (n * C + c) * S;
              for (std::size_t i = 0; i < S; ++i) {
                dg[c] += gy[base + i] * (*xhat)[base + i];
                db[c] += gy[base + i];
              }
            }
          if (wants(out, 1)) {
            auto& g = gbuf(out, 1);
            for (std::size_t c = 0; c < C; ++c) g[c] += dg[c];
          }
          if (wants(out, 2)) {
            auto& g = gbuf(out, 2);
            for (std::size_t c = 0; c < C; ++c) g[c] += db[c];
          }
        }
        if (!wants(out, 0)) return;
        auto& gx = gbuf(out, 0);
        if (!train) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t base = (n * C + c) * S;
              const double k = gd[c] * invstd[c];
              for (std::size_t i = 0; i < S; ++i) gx[base + i] += gy[base + i] * k;
            }
          return;
        }
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
              const double gh = gy[base + i] * gd[c];
              sum_g += gh;
              sum_gh += gh * (*xhat)[base + i];
            }
          }
          const double m = static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
              const double gh = gy[base + i] * gd[c];
              gx[base + i] += invstd[c] / m * (m * gh - sum_g - (*xhat)[base + i] * sum_gh);
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t Dout = weight.dim(0), Din = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != Din) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Dout}) {
    throw ShapeError("linear: bias must have shape [" + std::to_string(Dout) + "]");
  }
  const std::size_t rows = x.numel() / Din;
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> y(rows * Dout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < Dout; ++o) {
      double acc = has_bias ? bias.data()[o] : 0.0;
      for (std::size_t i = 0; i < Din; ++i) acc += wd[o * Din + i] * xd[r * Din + i];
      y[r * Dout + o] = acc;
    }
  record_flops(2ULL * rows * Din * Dout);
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Tensor::from_op("linear", out_shape, std::move(y), inputs, [rows, Din, Dout, has_bias](detail::Node& out) {
    const auto& xd = out.parents[0]->data;
    const auto& wd = out.parents[1]->data;
    const double* gy = out.grad.data();
    if (wants(out, 0)) {
      auto& gx = gbuf(out, 0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Dout; ++o) {
          const double g = gy[r * Dout + o];
          for (std::size_t i = 0; i < Din; ++i) gx[r * Din + i] += g * wd[o * Din + i];
        }
    }
    if (wants(out, 1)) {
      auto& gw = gbuf(out, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Dout; ++o) {
          const double g = gy[r * Dout + o];
          for (std::size_t i = 0; i < Din; ++i) gw[o * Din + i] += g * xd[r * Din + i];
        }
    }
    if (has_bias && wants(out, 2)) {
      auto& gb = gbuf(out, 2);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Dout; ++o) gb[o] += gy[r * Dout + o];
    }
  });
}

Tensor batched_outer(const Tensor& q, const Tensor& k) {
  require_rank(q, 2, "batched_outer");
  require_same_shape(q, k, "batched_outer");
  const std::size_t N = q.dim(0), V = q.dim(1);
  const auto qd = q.data();
  const auto kd = k.data();
  std::vector<double> y(N * V * V);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t j = 0; j < V; ++j) y[(n * V + i) * V + j] = qd[n * V + i] * kd[n * V + j];
  record_flops(y.size());
  return Tensor::from_op("batched_outer", {N, V, V}, std::move(y), {q, k}, [N, V](detail::Node& out) {
    const auto& qd = out.parents[0]->data;
    const auto& kd = out.parents[1]->data;
    const double* gy = out.grad.data();
    if (wants(out, 0)) {
      auto& g = gbuf(out, 0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < V; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < V; ++j) acc += gy[(n * V + i) * V + j] * kd[n * V + j];
          g[n * V + i] += acc;
        }
    }
    if (wants(out, 1)) {
      auto& g = gbuf(out, 1);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < V; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < V; ++i) acc += gy[(n * V + i) * V + j] * qd[n * V + i];
          g[n * V + j] += acc;
        }
    }
  });
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must lie in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (double& m : *mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * (*mask)[i];
  return Tensor::from_op("dropout", x.shape(), std::move(y), {x}, [mask](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * (*mask)[i];
  });
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0) throw ShapeError("concat_lastdim: rank mismatch");
  for (std::size_t d = 0; d + 1 < a.rank(); ++d) {
    if (a.dim(d) != b.dim(d)) {
      throw ShapeError("concat_lastdim: leading shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  const std::size_t La = a.shape().back(), Lb = b.shape().back();
  const std::size_t rows = a.numel() / La;
  Shape out_shape = a.shape();
  out_shape.back() = La + Lb;
  std::vector<double> y(rows * (La + Lb));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.data() + r * La, La, y.data() + r * (La + Lb));
    std::copy_n(bd.data() + r * Lb, Lb, y.data() + r * (La + Lb) + La);
  }
  return Tensor::from_op("concat_lastdim", out_shape, std::move(y), {a, b}, [rows, La, Lb](detail::Node& out) {
    const std::size_t L = La + Lb;
    if (wants(out, 0)) {
      auto& g = gbuf(out, 0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < La; ++i) g[r * La + i] += out.grad[r * L + i];
    }
    if (wants(out, 1)) {
      auto& g = gbuf(out, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < Lb; ++i) g[r * Lb + i] += out.grad[r * L + La + i];
    }
  });
}

Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  if (axis >= in.size()) throw ShapeError("slice_axis: axis out of range");
  if (begin >= end || end > in[axis]) {
    throw ShapeError("slice_axis: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") for axis of length " + std::to_string(in[axis]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t L = in[axis], W = end - begin;
  Shape out_shape = in;
  out_shape[axis] = W;
  std::vector<double> y(outer * W * inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xd.data() + (o * L + begin) * inner, W * inner, y.data() + o * W * inner);
  return Tensor::from_op("slice_axis", out_shape, std::move(y), {x}, [=](detail::Node& out) {
    auto& g = gbuf(out, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < W * inner; ++i) g[(o * L + begin) * inner + i] += out.grad[o * W * inner + i];
  });
}

}  // namespace ustf::ops
