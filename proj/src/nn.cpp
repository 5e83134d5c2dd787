#include "ustf/nn.hpp"

namespace ustf {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (double& v : data) v = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
  return Tensor(std::move(shape), std::move(data), true);
}

void round_to_float32(Tensor& t) {
  for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace ustf
