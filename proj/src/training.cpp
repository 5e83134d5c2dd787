#include "ustf/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>

#include "ustf/errors.hpp"

namespace ustf {

TrainConfig TrainConfig::tiny() {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs = 50;
  c.lr_milestones = {30, 40};
  return c;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be non-negative");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double rate = lr;
  for (std::size_t m : lr_milestones) {
    if (epoch > m) rate *= lr_decay;
  }
  return rate;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"momentum", momentum},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"lr_milestones", lr_milestones},
          {"lr_decay", lr_decay},
          {"precision", precision == Precision::Float32 ? "float32" : "float64"},
          {"frames", frames},
          {"recalibrate_bn", recalibrate_bn}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") {
        c.lr = value.get<double>();
      } else if (key == "weight_decay") {
        c.weight_decay = value.get<double>();
      } else if (key == "momentum") {
        c.momentum = value.get<double>();
      } else if (key == "batch_size") {
        c.batch_size = value.get<std::size_t>();
      } else if (key == "epochs") {
        c.epochs = value.get<std::size_t>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "lr_milestones") {
        c.lr_milestones = value.get<std::vector<std::size_t>>();
      } else if (key == "lr_decay") {
        c.lr_decay = value.get<double>();
      } else if (key == "precision") {
        const auto s = value.get<std::string>();
        if (s == "float32") {
          c.precision = Precision::Float32;
        } else if (s == "float64") {
          c.precision = Precision::Float64;
        } else {
          throw ConfigError("precision must be float32 or float64");
        }
      } else if (key == "frames") {
        c.frames = value.get<std::size_t>();
      } else if (key == "recalibrate_bn") {
        c.recalibrate_bn = value.get<bool>();
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

Tensor cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expected [N,K] logits, got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw ShapeError("cross_entropy: label count does not match batch");
  for (std::uint32_t y : labels) {
    if (y >= K) throw DataError("cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(K) + " classes");
  }
  const auto d = logits.data();
  auto probs = std::make_shared<std::vector<double>>(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = d.data() + n * K;
    const double m = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
    const double lse = m + std::log(z);
    for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] = std::exp(row[k] - lse);
    total += lse - row[labels[n]];
  }
  const double loss = total / static_cast<double>(N);
  return Tensor::from_op("cross_entropy", {1}, {loss}, {logits}, [probs, labels, N, K](detail::Node& out) {
    auto& g = out.parents[0]->grad_buffer();
    const double scale = out.grad[0] / static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const double target = k == labels[n] ? 1.0 : 0.0;
        g[n * K + k] += scale * ((*probs)[n * K + k] - target);
      }
  });
}

void sgd_step(const std::vector<NamedTensor>& params, SgdState& state, double lr, double momentum,
              double weight_decay) {
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.tensor.numel(), 0.0);
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw Error("sgd_step: parameter " + p.name + " has no gradient");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto data = t.mutable_data();
    const auto grad = t.grad();
    auto& v = state.velocity[i];
    const double wd = params[i].weight_decay ? weight_decay : 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = momentum * v[j] + grad[j] + wd * data[j];
      data[j] -= lr * v[j];
    }
  }
}

namespace {

std::vector<SkeletonSequence> prepare(const Dataset& ds, std::size_t frames) {
  std::vector<SkeletonSequence> out;
  out.reserve(ds.sequences.size());
  for (const auto& s : ds.sequences) out.push_back(frames == 0 ? s : fit_frames(s, frames));
  return out;
}

struct Batch {
  Tensor x;
  std::vector<std::uint32_t> labels;
};

Batch make_batch(const std::vector<SkeletonSequence>& seqs, const std::vector<std::size_t>& order, std::size_t begin,
                 std::size_t end) {
  std::vector<const SkeletonSequence*> items;
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    items.push_back(&seqs[order[i]]);
    b.labels.push_back(seqs[order[i]].label);
  }
  b.x = stack_batch(items);
  return b;
}

std::size_t count_correct(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
  const auto pred = argmax_rows(logits);
  std::size_t c = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) c += pred[i] == labels[i];
  return c;
}

// Batch k folds in with weight 1/(k+1), so every batch counts equally.
void recalibrate_bn(Model& model, const std::vector<SkeletonSequence>& seqs, std::size_t batch, Rng& rng,
                    bool round) {
  NoGradGuard no_grad;
  std::vector<double> saved;
  for (auto& b : model.params.blocks) saved.push_back(b.bn.momentum);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t k = 0;
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch, ++k) {
    for (auto& b : model.params.blocks) b.bn.momentum = 1.0 / static_cast<double>(k + 1);
    forward(make_batch(seqs, order, begin, std::min(begin + batch, seqs.size())).x, model, {Mode::Train, &rng});
  }
  for (std::size_t i = 0; i < saved.size(); ++i) model.params.blocks[i].bn.momentum = saved[i];
  if (round) {
    for (const auto& p : model.params.buffers()) {
      Tensor t = p.tensor;
      round_to_float32(t);
    }
  }
}

}  // namespace

std::vector<EpochMetrics> train_loop(Model& model, const Dataset& dataset, const TrainConfig& config,
                                     const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.sequences.empty()) throw DataError("train_loop: empty dataset");
  if (dataset.manifest.num_classes != model.config.num_classes) {
    throw ConfigError("dataset has " + std::to_string(dataset.manifest.num_classes) + " classes, model has " +
                      std::to_string(model.config.num_classes));
  }
  const auto seqs = prepare(dataset, config.frames);
  const std::size_t count = seqs.size();
  const std::size_t batch = std::min(config.batch_size, count);
  Rng shuffle_rng = Rng::derive(config.seed, 1);
  Rng dropout_rng = Rng::derive(config.seed, 2);
  const ForwardContext ctx{Mode::Train, &dropout_rng};
  const auto params = model.params.parameters();
  const auto buffers = model.params.buffers();
  SgdState state;
  std::vector<std::size_t> order(count);
  std::vector<EpochMetrics> history;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    const double lr = config.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < count; begin += batch) {
      const std::size_t end = std::min(begin + batch, count);
      Batch b = make_batch(seqs, order, begin, end);
      for (const auto& p : params) Tensor(p.tensor).zero_grad();
      Tensor logits, loss;
      try {
        logits = forward(b.x, model, ctx);
        loss = cross_entropy(logits, b.labels);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch starting at " + std::to_string(begin) + ": " +
                           e.what());
      }
      if (!std::isfinite(loss.item())) throw NumericError("epoch " + std::to_string(epoch) + ": non-finite loss");
      loss_sum += loss.item() * static_cast<double>(end - begin);
      correct += count_correct(logits, b.labels);
      loss.backward();
      sgd_step(params, state, lr, config.momentum, config.weight_decay);
      if (config.precision == Precision::Float32) {
        for (const auto& p : params) {
          Tensor t = p.tensor;
          round_to_float32(t);
        }
        for (const auto& p : buffers) {
          Tensor t = p.tensor;
          round_to_float32(t);
        }
      }
    }
    for (const auto& p : params) {
      for (double v : p.tensor.data()) {
        if (!std::isfinite(v)) throw NumericError("epoch " + std::to_string(epoch) + ": parameter " + p.name + " diverged");
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(count);
    m.top1 = static_cast<double>(correct) / static_cast<double>(count);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(m);
    if (on_epoch && !(config.recalibrate_bn && epoch == config.epochs)) on_epoch(m);
  }
  if (config.recalibrate_bn) {
    Rng recal_rng = Rng::derive(config.seed, 3);
    recalibrate_bn(model, seqs, batch, recal_rng, config.precision == Precision::Float32);
    if (on_epoch) on_epoch(history.back());
  }
  for (const auto& p : params) Tensor(p.tensor).zero_grad();
  return history;
}

EpochMetrics evaluate(Model& model, const Dataset& dataset, std::size_t batch_size, std::size_t frames) {
  if (dataset.sequences.empty()) throw DataError("evaluate: empty dataset");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
  const auto start = std::chrono::steady_clock::now();
  const auto seqs = prepare(dataset, frames);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, seqs.size());
    Batch b = make_batch(seqs, order, begin, end);
    Tensor logits = forward(b.x, model, {Mode::Eval, nullptr});
    loss_sum += cross_entropy(logits, b.labels).item() * static_cast<double>(end - begin);
    correct += count_correct(logits, b.labels);
  }
  EpochMetrics m;
  m.loss = loss_sum / static_cast<double>(seqs.size());
  m.top1 = static_cast<double>(correct) / static_cast<double>(seqs.size());
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::string format_shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string metrics_csv_header() { return "epoch,loss,top1,seconds"; }

std::string metrics_csv_row(const EpochMetrics& m, bool timing) {
  return std::to_string(m.epoch) + "," + format_shortest(m.loss) + "," + format_shortest(m.top1) + "," +
         format_shortest(timing ? m.seconds : 0.0);
}

}  // namespace ustf
