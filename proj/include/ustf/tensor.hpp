#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ustf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { Train, Eval };

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& out)>;

// One vertex of the define-by-run graph. Leaves own parameters and inputs;
// interior nodes own activations and a closure that pushes out.grad into
// the parents' grad buffers.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Zero-initialised on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor handle with reverse-mode differentiation.
///
/// Copies share storage; use clone() for a deep copy. Leaves may be mutated
/// in place through mutable_data(), which is how optimisers and finite
/// difference probes update parameters.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates to every leaf that requires
  /// grad. The recorded graph is released afterwards, so a second call on
  /// the same result throws.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  /// Builds the result of a differentiable op. The result requires grad iff
  /// gradient recording is enabled and any input requires grad; only then is
  /// `backward` retained. Throws NumericError on non-finite output.
  static Tensor from_op(std::string_view op, Shape shape,
                        std::vector<double> data,
                        const std::vector<Tensor>& inputs,
                        detail::BackwardFn backward);

  detail::Node& node() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts forward FLOPs reported by the kernels while in scope. Scopes nest;
/// every active counter on the thread sees every op.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t total() const { return total_; }

 private:
  friend void record_flops(std::uint64_t);
  std::uint64_t total_ = 0;
  FlopCounter* outer_;
};

void record_flops(std::uint64_t flops);

}  // namespace ustf
