#pragma once

#include <vector>

#include "ustf/gradcheck.hpp"
#include "ustf/model.hpp"

namespace ustf {

enum class GradScope { Op, Block, Model };

struct SuiteOptions {
  double tol = 1e-4;
  double step = 1e-4;
  // Debug negative control: scale every analytic gradient by this factor.
  double corrupt_factor = 1.0;
};

/// Every differentiable kernel, one report per (op, input) pair. Inputs
/// feeding a ReLU are drawn at least 0.1 away from the kink.
std::vector<GradCheckReport> check_ops(const SuiteOptions& options);

/// A full block (N=1, Cin=C'=4, T=6, V=5) in train mode with a replayed
/// dropout mask, plus a projecting block (4 -> 6). One report per tensor.
/// Block and model points are redrawn until no finite-difference step flips
/// the sign of any ReLU input.
std::vector<GradCheckReport> check_block(const SuiteOptions& options);

/// End-to-end cross-entropy of the gradient-check model, one report per
/// parameter tensor plus the input.
std::vector<GradCheckReport> check_model(const SuiteOptions& options);

std::vector<GradCheckReport> run_gradcheck(GradScope scope, const SuiteOptions& options);

/// 10 blocks of width 4, embed_dim 4, 5-joint chain, 3 classes, hidden 8.
ModelConfig gradcheck_model_config();

}  // namespace ustf
