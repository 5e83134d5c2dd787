#pragma once

#include <string>
#include <vector>

#include "ustf/rng.hpp"
#include "ustf/tensor.hpp"

namespace ustf {

// Per-call forward settings. Train mode with active dropout needs `rng`.
struct ForwardContext {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool weight_decay = true;
};

// U(-bound, bound) leaf that requires grad.
Tensor uniform_param(Shape shape, double bound, Rng& rng);

// Rounds every value to the nearest float32 in place.
void round_to_float32(Tensor& t);

}  // namespace ustf
