#include "ustf/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ustf/errors.hpp"

namespace ustf {

namespace {

thread_local bool g_grad_enabled = true;
thread_local FlopCounter* g_flop_counter = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw Error("use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node().data.size(); }

std::span<const double> Tensor::data() const { return node().data; }

std::span<double> Tensor::mutable_data() {
  if (!node().is_leaf) throw Error("mutable_data() is only available on leaf tensors");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node().is_leaf) throw Error("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node().is_leaf; }

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node().grad_buffer(); }

void Tensor::zero_grad() { node().grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node().data, false); }

Tensor Tensor::clone() const {
  Tensor t(shape(), node().data, node().requires_grad && node().is_leaf);
  return t;
}

void Tensor::backward() const {
  detail::Node& root = node();
  if (root.data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (root.released) throw Error("backward() called twice on the same graph; re-run the forward pass");
  if (!root.requires_grad) throw Error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS; reversing it yields a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }

  for (detail::Node* n : order) {
    if (n->is_leaf) continue;
    n->parents.clear();
    n->backward = nullptr;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

Tensor Tensor::from_op(std::string_view op, Shape shape, std::vector<double> data,
                       const std::vector<Tensor>& inputs, detail::BackwardFn backward) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
  Tensor out(std::move(shape), std::move(data), false);
  out.node_->op = std::string(op);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  out.node_->is_leaf = false;
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->parents.reserve(inputs.size());
    for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
  }
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

FlopCounter::FlopCounter() : outer_(g_flop_counter) { g_flop_counter = this; }
FlopCounter::~FlopCounter() { g_flop_counter = outer_; }

void record_flops(std::uint64_t flops) {
  for (FlopCounter* c = g_flop_counter; c != nullptr; c = c->outer_) c->total_ += flops;
}

}  // namespace ustf
