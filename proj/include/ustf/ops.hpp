#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ustf/rng.hpp"
#include "ustf/tensor.hpp"

namespace ustf::ops {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

enum class Unary { Relu, Sigmoid };
Tensor pointwise_unary(const Tensor& x, Unary kind);
inline Tensor relu(const Tensor& x) { return pointwise_unary(x, Unary::Relu); }
inline Tensor sigmoid(const Tensor& x) { return pointwise_unary(x, Unary::Sigmoid); }

/// While alive, hashes which side of zero every ReLU input on this thread
/// falls on, in evaluation order. Two evaluations with equal signatures took
/// the same branch at every kink.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  std::uint64_t signature() const { return hash_; }

 private:
  friend Tensor pointwise_unary(const Tensor&, Unary);
  std::uint64_t hash_;
  KinkMonitor* outer_;
};

/// Depthwise 2-D convolution over the (T, V) axes of x[N,C,T,V] with
/// kernel[C,kT,kV]; stride 1, zero "same" padding, odd kernel sizes only.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel);

/// 1x1 convolution: y[n,o,t,v] = sum_i w[o,i] x[n,i,t,v] + bias[o].
/// `bias` may be undefined.
Tensor pointwise_conv(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Depthwise followed by pointwise mixing and bias.
Tensor separable_conv2d(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise,
                        const Tensor& bias);

/// Mean over `axes`, which are removed from the result shape. Reducing every
/// axis yields shape [1].
Tensor avg_pool_axes(const Tensor& x, std::vector<std::size_t> axes);

/// Bin [start, end) of an adaptive partition of `length` into `bins`:
/// start = floor(i*L/bins), end = floor((i+1)*L/bins). When L < bins the
/// floor rule can give an empty bin; it is widened to one element.
struct Bin {
  std::size_t start;
  std::size_t end;
};
Bin adaptive_bin(std::size_t index, std::size_t length, std::size_t bins);

/// Adaptive average pooling of two axes (axis_a < axis_b) to out_a x out_b
/// bins each. Other axes keep their position and size.
Tensor adaptive_avg_pool(const Tensor& x, std::size_t axis_a, std::size_t axis_b,
                         std::size_t out_a, std::size_t out_b);

/// Max-subtracted softmax along the last axis.
Tensor softmax_lastdim(const Tensor& x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t channels);
};

/// Per-channel batch normalisation of x[N,C,T,V]. Train mode normalises with
/// the biased batch statistics over (N,T,V) and folds them into the running
/// estimates (unbiased variance); eval mode uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode);

/// Affine map along the trailing axis: x[..., Din] -> [..., Dout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// out[n,i,j] = q[n,i] * k[n,j].
Tensor batched_outer(const Tensor& q, const Tensor& k);

/// Inverted dropout. In train mode each element draws one uniform from `rng`
/// in flat order and is kept iff the draw is >= p, kept values scaled by
/// 1/(1-p). Eval mode and p == 0 return x unchanged without drawing.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

/// Concatenate along the last axis; leading axes must match.
Tensor concat_lastdim(const Tensor& a, const Tensor& b);

/// Contiguous slice [begin, end) of one axis.
Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

}  // namespace ustf::ops
