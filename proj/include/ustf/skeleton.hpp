#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ustf/tensor.hpp"

namespace ustf {

using Edge = std::pair<std::size_t, std::size_t>;

/// Undirected joint graph. Construction validates indices, self-loops and
/// duplicates.
class SkeletonGraph {
 public:
  SkeletonGraph(std::size_t num_joints, std::vector<Edge> edges);

  std::size_t num_joints() const { return num_joints_; }
  const std::vector<Edge>& edges() const { return edges_; }

  bool is_tree() const;
  /// Parent of every joint when the graph is rooted at `root`; the root maps
  /// to itself. Throws GraphError unless the graph is a spanning tree.
  std::vector<std::size_t> parents(std::size_t root = 0) const;
  std::vector<std::size_t> degrees() const;

  bool operator==(const SkeletonGraph&) const = default;

 private:
  std::size_t num_joints_;
  std::vector<Edge> edges_;
};

/// NTU RGB+D 25-joint kinematic tree, rooted at the spine base (joint 0).
SkeletonGraph ntu_graph();

/// Simple chain 0-1-...-(V-1); handy for tiny test configurations.
SkeletonGraph chain_graph(std::size_t num_joints);

/// Symmetric 0/1 matrix with ones on the diagonal and on every edge.
Tensor build_adjacency(const SkeletonGraph& graph);

/// One sample: C x T x V float32 values in (C, T, V) row-major order.
struct SkeletonSequence {
  std::size_t channels = 3;
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<float> data;
  std::uint32_t label = 0;

  SkeletonSequence() = default;
  SkeletonSequence(std::size_t c, std::size_t t, std::size_t v, std::uint32_t lbl = 0)
      : channels(c), frames(t), joints(v), data(c * t * v, 0.0f), label(lbl) {}

  float& at(std::size_t c, std::size_t t, std::size_t v) { return data[(c * frames + t) * joints + v]; }
  float at(std::size_t c, std::size_t t, std::size_t v) const { return data[(c * frames + t) * joints + v]; }

  bool operator==(const SkeletonSequence&) const = default;
};

/// Bone modality: bone[child] = joint[child] - joint[parent], root bone zero.
SkeletonSequence to_bone(const SkeletonSequence& x, const SkeletonGraph& graph, std::size_t root = 0);

/// Inverse of to_bone by prefix sums from the root; the root joint is taken
/// from `root_track` (C x T, same layout as the sequence with V = 1).
SkeletonSequence from_bone(const SkeletonSequence& bones, const SkeletonGraph& graph,
                           const std::vector<float>& root_track, std::size_t root = 0);

/// Motion modality: motion[t] = x[t+1] - x[t], last frame zero.
SkeletonSequence to_motion(const SkeletonSequence& x);

/// Resamples to exactly `frames` frames: zero-pad at the end when shorter,
/// uniform subsampling (index floor(i * T / frames)) when longer.
SkeletonSequence fit_frames(const SkeletonSequence& x, std::size_t frames);

/// Stacks sequences into a [N, C, T, V] tensor. All sequences must share a
/// shape.
Tensor stack_batch(const std::vector<const SkeletonSequence*>& batch);

}  // namespace ustf
