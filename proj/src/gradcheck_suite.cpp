#include "ustf/gradcheck_suite.hpp"

#include "ustf/ops.hpp"
#include "ustf/training.hpp"

namespace ustf {

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d), true);
}

// Magnitudes in [0.1, 1) with random sign, so ReLU inputs stay off the kink.
Tensor off_kink_leaf(Shape shape, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor(std::move(shape), std::move(d), true);
}

Tensor fixed_weights(const Shape& shape, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.uniform(-1.0, 1.0);
  return Tensor(shape, std::move(d), false);
}

// Random linear functional of y, so every output coordinate carries weight.
Tensor probe(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

constexpr std::uint64_t kMaxDraws = 64;

class Suite {
 public:
  explicit Suite(const SuiteOptions& o) : opts_{o.step, o.corrupt_factor}, tol_(o.tol) {}

  // The first evaluation is the unperturbed one; any later evaluation whose
  // ReLU sign pattern differs has stepped across a kink.
  void check(const std::string& name, const ScalarFn& f, const Tensor& x) {
    bool first = true;
    std::uint64_t base = 0;
    auto watched = [&](const Tensor& t) {
      ops::KinkMonitor monitor;
      Tensor y = f(t);
      if (first) {
        base = monitor.signature();
        first = false;
      } else if (monitor.signature() != base) {
        crossed_ = true;
      }
      return y;
    };
    GradCheckReport r = finite_diff_check(watched, x, tol_, opts_);
    r.name = name;
    reports_.push_back(std::move(r));
  }

  bool crossed_kink() const { return crossed_; }

  std::vector<GradCheckReport> take() { return std::move(reports_); }

 private:
  GradCheckOptions opts_;
  double tol_;
  std::vector<GradCheckReport> reports_;
  bool crossed_ = false;
};

}  // namespace

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.graph = chain_graph(5);
  c.num_classes = 3;
  c.embed_dim = 4;
  c.channel_schedule = std::vector<std::size_t>(10, 4);
  c.mlp_hidden = 8;
  return c;
}

std::vector<GradCheckReport> check_ops(const SuiteOptions& options) {
  Suite s(options);
  Rng rng(20240611);

  {
    Tensor a = random_leaf({2, 3}, rng), b = random_leaf({2, 3}, rng);
    Tensor w = fixed_weights({2, 3}, rng);
    s.check("add/a", [&](const Tensor& x) { return probe(ops::add(x, b), w); }, a);
    s.check("mul/a", [&](const Tensor& x) { return probe(ops::mul(x, b), w); }, a);
    s.check("mul/b", [&](const Tensor& x) { return probe(ops::mul(a, x), w); }, b);
    s.check("scale", [&](const Tensor& x) { return probe(ops::scale(x, -1.7), w); }, a);
    s.check("sum_of_squares", [&](const Tensor& x) { return ops::sum(ops::mul(x, x)); }, a);
  }
  {
    Tensor x = off_kink_leaf({3, 4}, rng);
    Tensor w = fixed_weights({3, 4}, rng);
    s.check("relu", [&](const Tensor& t) { return probe(ops::relu(t), w); }, x);
    Tensor y = random_leaf({3, 4}, rng, -4.0, 4.0);
    s.check("sigmoid", [&](const Tensor& t) { return probe(ops::sigmoid(t), w); }, y);
  }
  {
    Tensor x = random_leaf({2, 3, 4, 5}, rng);
    Tensor k = random_leaf({3, 3, 3}, rng);
    Tensor pw = random_leaf({2, 3}, rng);
    Tensor b = random_leaf({2}, rng);
    Tensor w3 = fixed_weights({2, 3, 4, 5}, rng);
    Tensor w2 = fixed_weights({2, 2, 4, 5}, rng);
    s.check("depthwise_conv2d/x", [&](const Tensor& t) { return probe(ops::depthwise_conv2d(t, k), w3); }, x);
    s.check("depthwise_conv2d/kernel", [&](const Tensor& t) { return probe(ops::depthwise_conv2d(x, t), w3); }, k);
    s.check("pointwise_conv/x", [&](const Tensor& t) { return probe(ops::pointwise_conv(t, pw, b), w2); }, x);
    s.check("pointwise_conv/weight", [&](const Tensor& t) { return probe(ops::pointwise_conv(x, t, b), w2); }, pw);
    s.check("pointwise_conv/bias", [&](const Tensor& t) { return probe(ops::pointwise_conv(x, pw, t), w2); }, b);
    s.check("separable_conv2d/x", [&](const Tensor& t) { return probe(ops::separable_conv2d(t, k, pw, b), w2); }, x);
    Tensor k15 = random_leaf({3, 1, 5}, rng);
    s.check("depthwise_conv2d/1x5", [&](const Tensor& t) { return probe(ops::depthwise_conv2d(t, k15), w3); }, x);
  }
  {
    Tensor x = random_leaf({2, 6, 3, 5}, rng);
    Tensor wg = fixed_weights({2, 5}, rng);
    s.check("avg_pool_axes{1,2}", [&](const Tensor& t) { return probe(ops::avg_pool_axes(t, {1, 2}), wg); }, x);
    Tensor wa = fixed_weights({2, 4, 4, 5}, rng);
    s.check("adaptive_avg_pool(6x3->4x4)",
            [&](const Tensor& t) { return probe(ops::adaptive_avg_pool(t, 1, 2, 4, 4), wa); }, x);
  }
  {
    Tensor x = random_leaf({3, 5}, rng, -3.0, 3.0);
    Tensor w = fixed_weights({3, 5}, rng);
    s.check("softmax_lastdim", [&](const Tensor& t) { return probe(ops::softmax_lastdim(t), w); }, x);
  }
  {
    Tensor x = random_leaf({2, 3, 2, 3}, rng);
    Tensor g = random_leaf({3}, rng, 0.5, 1.5), b = random_leaf({3}, rng);
    Tensor w = fixed_weights({2, 3, 2, 3}, rng);
    auto bn_train = [&](const Tensor& xx, const Tensor& gg, const Tensor& bb) {
      auto st = ops::BatchNormState::identity(3);
      return probe(ops::batchnorm2d(xx, gg, bb, st, Mode::Train), w);
    };
    s.check("batchnorm2d[train]/x", [&](const Tensor& t) { return bn_train(t, g, b); }, x);
    s.check("batchnorm2d[train]/gamma", [&](const Tensor& t) { return bn_train(x, t, b); }, g);
    s.check("batchnorm2d[train]/beta", [&](const Tensor& t) { return bn_train(x, g, t); }, b);
    ops::BatchNormState eval_state{Tensor({3}, {0.1, -0.2, 0.3}), Tensor({3}, {0.5, 1.5, 2.0})};
    s.check("batchnorm2d[eval]/x",
            [&](const Tensor& t) { return probe(ops::batchnorm2d(t, g, b, eval_state, Mode::Eval), w); }, x);
    s.check("batchnorm2d[eval]/gamma",
            [&](const Tensor& t) { return probe(ops::batchnorm2d(x, t, b, eval_state, Mode::Eval), w); }, g);
  }
  {
    Tensor x = random_leaf({2, 3, 7}, rng);
    Tensor wt = random_leaf({4, 7}, rng), b = random_leaf({4}, rng);
    Tensor w = fixed_weights({2, 3, 4}, rng);
    s.check("linear/x", [&](const Tensor& t) { return probe(ops::linear(t, wt, b), w); }, x);
    s.check("linear/weight", [&](const Tensor& t) { return probe(ops::linear(x, t, b), w); }, wt);
    s.check("linear/bias", [&](const Tensor& t) { return probe(ops::linear(x, wt, t), w); }, b);
  }
  {
    Tensor q = random_leaf({2, 5}, rng), k = random_leaf({2, 5}, rng);
    Tensor w = fixed_weights({2, 5, 5}, rng);
    s.check("batched_outer/q", [&](const Tensor& t) { return probe(ops::batched_outer(t, k), w); }, q);
    s.check("batched_outer/k", [&](const Tensor& t) { return probe(ops::batched_outer(q, t), w); }, k);
    Tensor w2 = fixed_weights({2, 10}, rng);
    s.check("concat_lastdim/a", [&](const Tensor& t) { return probe(ops::concat_lastdim(t, k), w2); }, q);
    s.check("concat_lastdim/b", [&](const Tensor& t) { return probe(ops::concat_lastdim(q, t), w2); }, k);
    Tensor w3 = fixed_weights({2, 5}, rng);
    s.check("dropout[replayed mask]",
            [&](const Tensor& t) {
              Rng mask_rng(99);
              return probe(ops::dropout(t, 0.5, Mode::Train, mask_rng), w3);
            },
            q);
  }
  {
    Tensor x = random_leaf({2, 4, 3, 5}, rng);
    Tensor w = fixed_weights({2, 2, 3, 5}, rng);
    s.check("slice_axis", [&](const Tensor& t) { return probe(ops::slice_axis(t, 1, 1, 3), w); }, x);
  }
  {
    Tensor a = random_leaf({2, 4, 4}, rng, 0.0, 1.0);
    Tensor prior = random_leaf({4, 4}, rng);
    Tensor alpha = Tensor::scalar(0.3, true);
    Tensor w = fixed_weights({2, 4, 4}, rng);
    s.check("fuse_topology/A", [&](const Tensor& t) { return probe(fuse_topology({t}, prior, alpha), w); }, a);
    s.check("fuse_topology/A_init", [&](const Tensor& t) { return probe(fuse_topology({a}, t, alpha), w); }, prior);
    s.check("fuse_topology/alpha", [&](const Tensor& t) { return probe(fuse_topology({a}, prior, t), w); }, alpha);
  }
  {
    Tensor f = random_leaf({2, 3, 4, 5}, rng);
    Tensor m = random_leaf({2, 5, 5}, rng);
    Tensor w = fixed_weights({2, 3, 4, 5}, rng);
    s.check("apply_attention/f", [&](const Tensor& t) { return probe(apply_attention(t, m), w); }, f);
    s.check("apply_attention/M", [&](const Tensor& t) { return probe(apply_attention(f, t), w); }, m);
    Tensor sv = random_leaf({2, 3}, rng), kern = random_leaf({3}, rng);
    Tensor ws = fixed_weights({2, 3}, rng);
    s.check("channel_conv1d/s", [&](const Tensor& t) { return probe(channel_conv1d(t, kern), ws); }, sv);
    s.check("channel_conv1d/kernel", [&](const Tensor& t) { return probe(channel_conv1d(sv, t), ws); }, kern);
    s.check("residual_channel_gate/f", [&](const Tensor& t) { return probe(residual_channel_gate(t, sv), w); }, f);
    s.check("residual_channel_gate/w", [&](const Tensor& t) { return probe(residual_channel_gate(f, t), w); }, sv);
    s.check("channel_refine/f", [&](const Tensor& t) { return probe(channel_refine(t, kern), w); }, f);
    s.check("channel_refine/kernel", [&](const Tensor& t) { return probe(channel_refine(f, t), w); }, kern);
    Tensor emb = random_leaf({3, 5}, rng);
    s.check("add_joint_embedding/x", [&](const Tensor& t) { return probe(add_joint_embedding(t, emb), w); }, f);
    s.check("add_joint_embedding/e", [&](const Tensor& t) { return probe(add_joint_embedding(f, t), w); }, emb);
  }
  {
    Tensor f = random_leaf({2, 4, 8, 5}, rng);
    Rng init_rng(5);
    auto params = MSPAttentionParams::init(5, 6, 0.0, AttentionVariant::Combined, init_rng);
    Tensor w = fixed_weights({2, 5, 5}, rng);
    s.check("attention_map/f", [&](const Tensor& t) { return probe(attention_map(t, params, {}).values, w); }, f);
    s.check("attention_map/mlp_q.w1",
            [&](const Tensor& t) {
              auto p = params;
              p.query.w1 = t;
              return probe(attention_map(f, p, {}).values, w);
            },
            params.query.w1);
    s.check("attention_map/mlp_k.w2",
            [&](const Tensor& t) {
              auto p = params;
              p.key.w2 = t;
              return probe(attention_map(f, p, {}).values, w);
            },
            params.key.w2);
  }
  {
    Tensor logits = random_leaf({4, 3}, rng, -2.0, 2.0);
    const std::vector<std::uint32_t> labels{0, 2, 1, 2};
    s.check("cross_entropy", [&](const Tensor& t) { return cross_entropy(t, labels); }, logits);
  }
  return s.take();
}

namespace {

std::vector<GradCheckReport> check_block_at(const SuiteOptions& options, std::size_t out, std::uint64_t draw,
                                            bool& crossed) {
  Suite s(options);
  Rng rng = Rng::derive(77, draw);
  const SkeletonGraph graph = chain_graph(5);
  BlockConfig bc;
  bc.in_channels = 4;
  bc.out_channels = out;
  bc.mlp_hidden = 8;
  BlockParams params = BlockParams::init(bc, graph, rng);
  // Break the symmetric init of the prior and BN affine.
  for (double& v : params.a_init.mutable_data()) v += rng.uniform(-0.2, 0.2);
  for (double& v : params.bn_gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
  for (double& v : params.bn_beta.mutable_data()) v = rng.uniform(-0.5, 0.5);
  Tensor x = random_leaf({1, 4, 6, 5}, rng);
  Tensor w = fixed_weights({1, out, 6, 5}, rng);
  const std::string tag = "block[4->" + std::to_string(out) + "]/";

  auto run = [&](const Tensor& input) {
    Rng mask_rng(2024);
    return probe(block_forward(input, params, {Mode::Train, &mask_rng}), w);
  };
  s.check(tag + "x", run, x);
  std::vector<NamedTensor> named;
  params.collect_parameters("", named);
  for (const auto& nt : named) {
    s.check(tag + nt.name.substr(1), [&](const Tensor&) { return run(x); }, nt.tensor);
  }
  crossed = s.crossed_kink();
  return s.take();
}

std::vector<GradCheckReport> check_model_at(const SuiteOptions& options, std::uint64_t draw, bool& crossed) {
  Suite s(options);
  Rng rng = Rng::derive(4242, draw);
  Model model = Model::create(gradcheck_model_config(), 11 + draw);
  for (auto& block : model.params.blocks) {
    for (double& v : block.a_init.mutable_data()) v += rng.uniform(-0.2, 0.2);
  }
  Tensor x = random_leaf({2, 3, 8, 5}, rng);
  const std::vector<std::uint32_t> labels{1, 2};
  auto run = [&](const Tensor& input) {
    Rng mask_rng(31337);
    return cross_entropy(forward(input, model, {Mode::Train, &mask_rng}), labels);
  };
  s.check("model/x", run, x);
  for (const auto& nt : model.params.parameters()) {
    s.check("model/" + nt.name, [&](const Tensor&) { return run(x); }, nt.tensor);
  }
  crossed = s.crossed_kink();
  return s.take();
}

// Redraws the point until no finite-difference step crosses a ReLU kink.
template <typename F>
std::vector<GradCheckReport> first_smooth_draw(F&& at) {
  std::vector<GradCheckReport> reports;
  for (std::uint64_t draw = 0; draw < kMaxDraws; ++draw) {
    bool crossed = false;
    reports = at(draw, crossed);
    if (!crossed) break;
  }
  return reports;
}

}  // namespace

std::vector<GradCheckReport> check_block(const SuiteOptions& options) {
  std::vector<GradCheckReport> all;
  for (std::size_t out : {std::size_t{4}, std::size_t{6}}) {
    auto r = first_smooth_draw([&](std::uint64_t d, bool& c) { return check_block_at(options, out, d, c); });
    all.insert(all.end(), r.begin(), r.end());
  }
  return all;
}

std::vector<GradCheckReport> check_model(const SuiteOptions& options) {
  return first_smooth_draw([&](std::uint64_t d, bool& c) { return check_model_at(options, d, c); });
}

std::vector<GradCheckReport> run_gradcheck(GradScope scope, const SuiteOptions& options) {
  switch (scope) {
    case GradScope::Op:
      return check_ops(options);
    case GradScope::Block:
      return check_block(options);
    case GradScope::Model:
      return check_model(options);
  }
  return {};
}

}  // namespace ustf
