#include <doctest.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "ustf/dataset.hpp"
#include "ustf/errors.hpp"

using namespace ustf;

namespace {

SkeletonSequence random_sequence(Rng& rng, std::size_t T, std::size_t V, std::uint32_t label = 0) {
  SkeletonSequence s(3, T, V, label);
  for (float& v : s.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return s;
}

// Values on a 2^-10 grid in [-4, 4]: every sum and difference of a few of
// them is exact in float32.
SkeletonSequence dyadic_sequence(Rng& rng, std::size_t T, std::size_t V) {
  SkeletonSequence s(3, T, V);
  for (float& v : s.data) v = static_cast<float>(static_cast<double>(rng.below(8193)) / 1024.0 - 4.0);
  return s;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST_CASE("build_adjacency") {
  Tensor a2 = build_adjacency(SkeletonGraph(2, {{0, 1}}));
  CHECK(testutil::vec(a2) == std::vector<double>{1, 1, 1, 1});
  Tensor a3 = build_adjacency(SkeletonGraph(3, {}));
  CHECK(testutil::vec(a3) == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});

  const SkeletonGraph g = ntu_graph();
  Tensor a = build_adjacency(g);
  const auto deg = g.degrees();
  for (std::size_t i = 0; i < 25; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 25; ++j) {
      CHECK(a[i * 25 + j] == a[j * 25 + i]);
      CHECK((a[i * 25 + j] == 0.0 || a[i * 25 + j] == 1.0));
      row += a[i * 25 + j];
    }
    CHECK(a[i * 25 + i] == 1.0);
    CHECK(row == static_cast<double>(deg[i] + 1));
  }
}

TEST_CASE("ntu_graph is a 25-joint tree") {
  const SkeletonGraph g = ntu_graph();
  CHECK(g.num_joints() == 25);
  CHECK(g.edges().size() == 24);
  CHECK(g.is_tree());
  const auto parent = g.parents(0);
  CHECK(parent[0] == 0);
  std::set<std::size_t> seen;
  for (const auto& [a, b] : g.edges()) {
    seen.insert(a);
    seen.insert(b);
  }
  CHECK(seen.size() == 25);
}

TEST_CASE("graph validation") {
  CHECK_THROWS_AS(SkeletonGraph(3, {{0, 3}}), GraphError);
  CHECK_THROWS_AS(SkeletonGraph(3, {{1, 1}}), GraphError);
  CHECK_THROWS_AS(SkeletonGraph(3, {{0, 1}, {1, 0}}), GraphError);
  CHECK_THROWS_AS(SkeletonGraph(0, {}), GraphError);
  const SkeletonGraph cyc(3, {{0, 1}, {1, 2}, {2, 0}});
  CHECK_FALSE(cyc.is_tree());
  CHECK_THROWS_AS(cyc.parents(0), GraphError);
  CHECK_THROWS_AS(SkeletonGraph(4, {{0, 1}, {2, 3}}).parents(0), GraphError);
}

TEST_CASE("to_bone") {
  const SkeletonGraph g = ntu_graph();
  SkeletonSequence same(3, 4, 25);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t v = 0; v < 25; ++v) same.at(c, t, v) = static_cast<float>(c + 0.5 * t);
  for (float b : to_bone(same, g).data) CHECK(b == 0.0f);

  Rng rng(1);
  SkeletonSequence x = dyadic_sequence(rng, 5, 25);
  SkeletonSequence moved = x;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t v = 0; v < 25; ++v) moved.at(c, t, v) += static_cast<float>(0.25 * (c + 1));
  CHECK(to_bone(moved, g).data == to_bone(x, g).data);

  SUBCASE("prefix sums along the tree invert it") {
    std::vector<float> root(3 * 5);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 5; ++t) root[c * 5 + t] = x.at(c, t, 0);
    CHECK(from_bone(to_bone(x, g), g, root).data == x.data);

    // Arbitrary float32 input: each bone rounds once, so the rebuilt joint is
    // off by at most a few ulps of the path length.
    SkeletonSequence y = random_sequence(rng, 5, 25);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 5; ++t) root[c * 5 + t] = y.at(c, t, 0);
    const auto back = from_bone(to_bone(y, g), g, root);
    for (std::size_t i = 0; i < y.data.size(); ++i) CHECK(std::abs(back.data[i] - y.data[i]) < 1e-5f);
  }

  CHECK_THROWS_AS(to_bone(x, SkeletonGraph(25, {{0, 1}})), GraphError);
  CHECK_THROWS_AS(to_bone(x, chain_graph(5)), ShapeError);
}

TEST_CASE("to_motion") {
  SkeletonSequence still(3, 6, 4);
  for (float& v : still.data) v = 0.7f;
  for (float m : to_motion(still).data) CHECK(m == 0.0f);

  SkeletonSequence lin(3, 6, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t v = 0; v < 4; ++v) lin.at(c, t, v) = static_cast<float>(0.25 * t + v);
  const auto m = to_motion(lin);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < 4; ++v) {
      for (std::size_t t = 0; t + 1 < 6; ++t) CHECK(m.at(c, t, v) == 0.25f);
      CHECK(m.at(c, 5, v) == 0.0f);
    }

  Rng rng(2);
  SkeletonSequence x = dyadic_sequence(rng, 7, 5);
  const auto mo = to_motion(x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < 5; ++v) {
      float acc = x.at(c, 0, v);
      for (std::size_t t = 1; t < 7; ++t) {
        acc += mo.at(c, t - 1, v);
        CHECK(acc == x.at(c, t, v));
      }
    }
  CHECK_THROWS_AS(to_motion(SkeletonSequence(3, 1, 5)), ShapeError);
}

TEST_CASE("fit_frames") {
  Rng rng(3);
  SkeletonSequence x = random_sequence(rng, 10, 3, 2);
  const auto pad = fit_frames(x, 16);
  CHECK(pad.frames == 16);
  CHECK(pad.label == 2);
  CHECK(pad.at(1, 9, 2) == x.at(1, 9, 2));
  CHECK(pad.at(1, 10, 2) == 0.0f);
  const auto sub = fit_frames(x, 4);
  for (std::size_t t = 0; t < 4; ++t) CHECK(sub.at(0, t, 1) == x.at(0, t * 10 / 4, 1));
}

TEST_CASE("SKEL round trip and header layout") {
  Rng rng(4);
  const SkeletonSequence s = random_sequence(rng, 7, 25, 3);
  const auto bytes = encode_skel(s);
  REQUIRE(bytes.size() == 20 + 4 * 3 * 7 * 25);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SKL1");
  CHECK(bytes[4] == 3);
  CHECK(bytes[8] == 7);
  CHECK(bytes[12] == 25);
  CHECK(bytes[16] == 3);
  std::uint32_t first = 0;
  for (int i = 0; i < 4; ++i) first |= static_cast<std::uint32_t>(bytes[20 + i]) << (8 * i);
  CHECK(std::bit_cast<float>(first) == s.data[0]);

  const auto dir = testutil::scratch_dir("skel");
  write_skel(dir / "a.skel", s);
  const auto back = read_skel(dir / "a.skel");
  CHECK(back == s);
  CHECK(read_file(dir / "a.skel") == bytes);
  CHECK_FALSE(std::filesystem::exists(dir / "a.skel.tmp"));
}

TEST_CASE("SKEL rejects malformed input") {
  Rng rng(5);
  const auto good = encode_skel(random_sequence(rng, 4, 5));
  auto bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_skel(bad), DataError);
  CHECK_THROWS_AS(decode_skel(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), DataError);
  CHECK_THROWS_AS(decode_skel(std::vector<std::uint8_t>(good.begin(), good.end() - 3)), DataError);
  auto extra = good;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_skel(extra), DataError);
  auto zero = good;
  put_u32(zero, 8, 0);
  CHECK_THROWS_AS(decode_skel(zero), DataError);
  auto huge = good;
  put_u32(huge, 4, 0xFFFFFFFFu);
  put_u32(huge, 8, 0xFFFFFFFFu);
  put_u32(huge, 12, 0xFFFFFFFFu);
  CHECK_THROWS_AS(decode_skel(huge), DataError);
  auto nan = good;
  put_u32(nan, 24, std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN()));
  CHECK_THROWS_AS(decode_skel(nan), DataError);
  CHECK_THROWS_AS(read_skel("/nonexistent/x.skel"), DataError);
}

TEST_CASE("synth_dataset") {
  SynthOptions o;
  o.seed = 0;
  o.num_classes = 4;
  o.samples_per_class = 32;
  o.frames = 16;
  const Dataset a = synth_dataset(o, ntu_graph());
  const Dataset b = synth_dataset(o, ntu_graph());
  REQUIRE(a.sequences.size() == 128);
  CHECK(a.sequences == b.sequences);
  std::vector<int> counts(4, 0);
  for (const auto& s : a.sequences) {
    ++counts[s.label];
    CHECK(s.frames == 16);
    CHECK(s.joints == 25);
    for (float v : s.data) CHECK(std::isfinite(v));
  }
  CHECK(counts == std::vector<int>{32, 32, 32, 32});
  o.seed = 1;
  CHECK_FALSE(synth_dataset(o, ntu_graph()).sequences == a.sequences);

  SUBCASE("classes are farther apart than samples within a class") {
    // Mean trajectory per class; compare the mean distance of each sample to
    // its own class mean with the distances between class means.
    const std::size_t D = a.sequences[0].data.size();
    std::vector<std::vector<double>> mean(4, std::vector<double>(D, 0.0));
    for (const auto& s : a.sequences)
      for (std::size_t i = 0; i < D; ++i) mean[s.label][i] += s.data[i] / 32.0;
    auto dist = [D](auto&& x, auto&& y) {
      double acc = 0.0;
      for (std::size_t i = 0; i < D; ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
      return std::sqrt(acc);
    };
    double intra = 0.0;
    for (const auto& s : a.sequences) intra += dist(s.data, mean[s.label]) / 128.0;
    double inter = INFINITY;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) inter = std::min(inter, dist(mean[i], mean[j]));
    CHECK(inter > intra);
  }

  SUBCASE("non-NTU graphs") {
    SynthOptions c = o;
    c.num_classes = 3;
    c.samples_per_class = 2;
    const Dataset d = synth_dataset(c, chain_graph(5));
    CHECK(d.sequences.size() == 6);
    CHECK(d.sequences[0].joints == 5);
  }
  SynthOptions bad = o;
  bad.frames = 7;
  CHECK_THROWS_AS(synth_dataset(bad, ntu_graph()), ConfigError);
}

TEST_CASE("dataset directory round trip") {
  SynthOptions o;
  o.num_classes = 3;
  o.samples_per_class = 2;
  o.frames = 8;
  const Dataset d = synth_dataset(o, ntu_graph());
  const auto dir = testutil::scratch_dir("dataset");
  write_dataset(dir, d);
  const Dataset back = load_dataset(dir);
  CHECK(back.sequences == d.sequences);
  CHECK(back.manifest.num_classes == 3);
  CHECK(back.manifest.files == d.manifest.files);
  CHECK(back.manifest.graph == ntu_graph());
  const auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  CHECK(j["graph"] == "ntu25");
  CHECK(j["files"].size() == 6);

  SUBCASE("inline graph") {
    Dataset c = synth_dataset(o, chain_graph(4));
    const auto cdir = testutil::scratch_dir("dataset_chain");
    write_dataset(cdir, c);
    CHECK(load_dataset(cdir).manifest.graph == chain_graph(4));
  }
  SUBCASE("labels must be below num_classes") {
    Dataset e = d;
    e.manifest.num_classes = 2;
    e.manifest.class_names.resize(2);
    const auto edir = testutil::scratch_dir("dataset_bad");
    write_dataset(edir, e);
    CHECK_THROWS_AS(load_dataset(edir), DataError);
  }
  CHECK_THROWS_AS(load_dataset(testutil::scratch_dir("empty")), DataError);
}
