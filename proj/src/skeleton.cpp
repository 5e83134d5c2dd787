#include "ustf/skeleton.hpp"

#include <algorithm>
#include <set>

#include "ustf/errors.hpp"

namespace ustf {

SkeletonGraph::SkeletonGraph(std::size_t num_joints, std::vector<Edge> edges)
    : num_joints_(num_joints), edges_(std::move(edges)) {
  if (num_joints_ == 0) throw GraphError("skeleton graph needs at least one joint");
  std::set<Edge> seen;
  for (const auto& [a, b] : edges_) {
    if (a >= num_joints_ || b >= num_joints_) {
      throw GraphError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") out of range for " +
                       std::to_string(num_joints_) + " joints");
    }
    if (a == b) throw GraphError("self-loop on joint " + std::to_string(a));
    if (!seen.insert({std::min(a, b), std::max(a, b)}).second) {
      throw GraphError("duplicate edge (" + std::to_string(a) + "," + std::to_string(b) + ")");
    }
  }
}

std::vector<std::size_t> SkeletonGraph::degrees() const {
  std::vector<std::size_t> deg(num_joints_, 0);
  for (const auto& [a, b] : edges_) {
    ++deg[a];
    ++deg[b];
  }
  return deg;
}

std::vector<std::size_t> SkeletonGraph::parents(std::size_t root) const {
  if (root >= num_joints_) throw GraphError("root joint out of range");
  if (edges_.size() + 1 != num_joints_) {
    throw GraphError("graph is not a tree: " + std::to_string(edges_.size()) + " edges for " +
                     std::to_string(num_joints_) + " joints");
  }
  std::vector<std::vector<std::size_t>> adj(num_joints_);
  for (const auto& [a, b] : edges_) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> parent(num_joints_, kUnset);
  parent[root] = root;
  std::vector<std::size_t> queue{root};
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const std::size_t u = queue[head];
    for (std::size_t w : adj[u]) {
      if (parent[w] != kUnset) continue;
      parent[w] = u;
      queue.push_back(w);
    }
  }
  if (queue.size() != num_joints_) throw GraphError("graph is not a tree: it is disconnected");
  return parent;
}

bool SkeletonGraph::is_tree() const {
  try {
    parents(0);
    return true;
  } catch (const GraphError&) {
    return false;
  }
}

SkeletonGraph ntu_graph() {
  // 1-based pairs as published with the dataset.
  static constexpr std::size_t kPairs[24][2] = {
      {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},   {8, 7},
      {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
      {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12}};
  std::vector<Edge> edges;
  edges.reserve(24);
  for (const auto& p : kPairs) edges.emplace_back(p[0] - 1, p[1] - 1);
  return SkeletonGraph(25, std::move(edges));
}

SkeletonGraph chain_graph(std::size_t num_joints) {
  std::vector<Edge> edges;
  for (std::size_t v = 1; v < num_joints; ++v) edges.emplace_back(v - 1, v);
  return SkeletonGraph(num_joints, std::move(edges));
}

Tensor build_adjacency(const SkeletonGraph& graph) {
  const std::size_t V = graph.num_joints();
  std::vector<double> a(V * V, 0.0);
  for (std::size_t i = 0; i < V; ++i) a[i * V + i] = 1.0;
  for (const auto& [i, j] : graph.edges()) {
    a[i * V + j] = 1.0;
    a[j * V + i] = 1.0;
  }
  return Tensor({V, V}, std::move(a));
}

SkeletonSequence to_bone(const SkeletonSequence& x, const SkeletonGraph& graph, std::size_t root) {
  if (x.joints != graph.num_joints()) throw ShapeError("to_bone: joint count does not match graph");
  const auto parent = graph.parents(root);
  SkeletonSequence out(x.channels, x.frames, x.joints, x.label);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t t = 0; t < x.frames; ++t)
      for (std::size_t v = 0; v < x.joints; ++v) {
        out.at(c, t, v) = v == root ? 0.0f : x.at(c, t, v) - x.at(c, t, parent[v]);
      }
  return out;
}

SkeletonSequence from_bone(const SkeletonSequence& bones, const SkeletonGraph& graph,
                           const std::vector<float>& root_track, std::size_t root) {
  if (bones.joints != graph.num_joints()) throw ShapeError("from_bone: joint count does not match graph");
  if (root_track.size() != bones.channels * bones.frames) throw ShapeError("from_bone: root track size mismatch");
  const auto parent = graph.parents(root);
  // BFS order guarantees a parent is reconstructed before its children.
  std::vector<std::size_t> order{root};
  std::vector<std::vector<std::size_t>> children(graph.num_joints());
  for (std::size_t v = 0; v < graph.num_joints(); ++v) {
    if (v != root) children[parent[v]].push_back(v);
  }
  for (std::size_t head = 0; head < order.size(); ++head) {
    for (std::size_t ch : children[order[head]]) order.push_back(ch);
  }
  SkeletonSequence out(bones.channels, bones.frames, bones.joints, bones.label);
  for (std::size_t c = 0; c < bones.channels; ++c)
    for (std::size_t t = 0; t < bones.frames; ++t)
      for (std::size_t v : order) {
        out.at(c, t, v) = v == root ? root_track[c * bones.frames + t]
                                    : out.at(c, t, parent[v]) + bones.at(c, t, v);
      }
  return out;
}

SkeletonSequence to_motion(const SkeletonSequence& x) {
  if (x.frames < 2) throw ShapeError("to_motion: need at least 2 frames");
  SkeletonSequence out(x.channels, x.frames, x.joints, x.label);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t t = 0; t + 1 < x.frames; ++t)
      for (std::size_t v = 0; v < x.joints; ++v) out.at(c, t, v) = x.at(c, t + 1, v) - x.at(c, t, v);
  return out;
}

SkeletonSequence fit_frames(const SkeletonSequence& x, std::size_t frames) {
  if (frames == 0) throw ShapeError("fit_frames: target length must be positive");
  if (frames == x.frames) return x;
  SkeletonSequence out(x.channels, frames, x.joints, x.label);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t t = 0; t < frames; ++t) {
      std::size_t src = t;
      if (x.frames > frames) {
        src = t * x.frames / frames;
      } else if (t >= x.frames) {
        continue;
      }
      for (std::size_t v = 0; v < x.joints; ++v) out.at(c, t, v) = x.at(c, src, v);
    }
  return out;
}

Tensor stack_batch(const std::vector<const SkeletonSequence*>& batch) {
  if (batch.empty()) throw ShapeError("stack_batch: empty batch");
  const auto& first = *batch.front();
  const std::size_t per = first.data.size();
  std::vector<double> data;
  data.reserve(per * batch.size());
  for (const auto* s : batch) {
    if (s->channels != first.channels || s->frames != first.frames || s->joints != first.joints) {
      throw ShapeError("stack_batch: sequences have different shapes");
    }
    data.insert(data.end(), s->data.begin(), s->data.end());
  }
  return Tensor({batch.size(), first.channels, first.frames, first.joints}, std::move(data));
}

}  // namespace ustf
