#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ustf/dataset.hpp"
#include "ustf/model.hpp"

namespace ustf {

enum class Precision { Float32, Float64 };

struct TrainConfig {
  double lr = 0.1;
  double weight_decay = 0.0005;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::vector<std::size_t> lr_milestones{60, 80};
  double lr_decay = 0.1;
  // Float32 keeps parameters and BN statistics float32-representable after
  // every step so checkpoints round-trip exactly; arithmetic is double.
  Precision precision = Precision::Float32;
  // 0 keeps each sequence's length; otherwise sequences are padded or
  // subsampled to this many frames.
  std::size_t frames = 0;
  // After the last epoch, replace the BN running statistics with an equal
  // weight average over one pass of the training set at the final weights.
  // The moving averages trail fast-changing weights (alpha in particular)
  // badly enough to put eval-mode accuracy at chance on small runs.
  bool recalibrate_bn = true;

  /// Settings for the desk-scale learning check on the tiny model.
  static TrainConfig tiny();

  void validate() const;
  /// Learning rate in effect during `epoch` (1-based).
  double lr_at(std::size_t epoch) const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double top1 = 0.0;
  double seconds = 0.0;
};

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels);

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum * v + grad + wd * param; param <- param - lr * v, with the
/// decay term skipped for tensors flagged weight_decay = false. Throws if a
/// parameter has no gradient.
void sgd_step(const std::vector<NamedTensor>& params, SgdState& state, double lr, double momentum,
              double weight_decay);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Shuffled mini-batch SGD. Shuffling draws from stream 1 of the seed and
/// dropout from stream 2, so a fixed seed gives a bit-identical run.
/// Throws NumericError (with the epoch) on a non-finite loss. The BN
/// recalibration pass, when enabled, draws its dropout masks from stream 3.
std::vector<EpochMetrics> train_loop(Model& model, const Dataset& dataset, const TrainConfig& config,
                                     const EpochCallback& on_epoch = {});

/// Eval-mode loss and top-1 accuracy; mutates nothing.
EpochMetrics evaluate(Model& model, const Dataset& dataset, std::size_t batch_size = 128, std::size_t frames = 0);

std::string metrics_csv_header();
/// Shortest round-trip formatting; seconds written as 0 when timing is off.
std::string metrics_csv_row(const EpochMetrics& m, bool timing = true);

/// Shortest decimal string that parses back to the same double.
std::string format_shortest(double v);

}  // namespace ustf
