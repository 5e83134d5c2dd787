#include <doctest.h>

#include <fstream>

#include "scalar_oracle.hpp"
#include "test_util.hpp"
#include "ustf/errors.hpp"
#include "ustf/gradcheck_suite.hpp"
#include "ustf/model.hpp"

using namespace ustf;
using testutil::random_tensor;
using testutil::vec;

namespace {

ModelConfig small_model() {
  ModelConfig c = ModelConfig::tiny();
  c.graph = chain_graph(5);
  c.num_classes = 3;
  c.embed_dim = 6;
  c.channel_schedule = {6, 8, 4};
  c.mlp_hidden = 8;
  return c;
}

void round_all(Model& m) {
  for (auto& nt : m.params.parameters()) round_to_float32(nt.tensor);
  for (auto& nt : m.params.buffers()) round_to_float32(nt.tensor);
}

}  // namespace

TEST_CASE("embed") {
  Model m = Model::create(small_model(), 1);
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);

  for (auto* t : {&m.params.embed_weight, &m.params.embed_bias, &m.params.joint_embed})
    for (double& v : t->mutable_data()) v = 0.0;
  for (double v : vec(embed(x, m.params))) CHECK(v == 0.0);

  for (double& v : m.params.joint_embed.mutable_data()) v = rng.uniform(-1, 1);
  const auto e = vec(embed(x, m.params));
  const auto e2 = vec(embed(random_tensor({2, 3, 4, 5}, rng), m.params));
  CHECK(e == e2);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t v = 0; v < 5; ++v) CHECK(e[((n * 6 + c) * 4 + t) * 5 + v] == m.params.joint_embed[c * 5 + v]);

  Model r = Model::create(small_model(), 2);
  const auto y = vec(embed(x, r.params));
  const oracle::Dims d{2, 3, 4, 5};
  const oracle::Dims o{2, 6, 4, 5};
  std::vector<double> want(o.size());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t v = 0; v < 5; ++v) {
          double acc = r.params.embed_bias[c] + r.params.joint_embed[c * 5 + v];
          for (std::size_t ci = 0; ci < 3; ++ci) acc += r.params.embed_weight[c * 3 + ci] * x[d.at(n, ci, t, v)];
          want[o.at(n, c, t, v)] = acc;
        }
  CHECK(oracle::rel_err(y, want) < 1e-12);

  CHECK_THROWS_AS(embed(random_tensor({1, 2, 4, 5}, rng), r.params), ShapeError);

  SUBCASE("joint embedding can be disabled") {
    ModelConfig c = small_model();
    c.joint_embedding = false;
    Model plain = Model::create(c, 3);
    CHECK_FALSE(plain.params.joint_embed.defined());
    CHECK(embed(x, plain.params).shape() == Shape{2, 6, 4, 5});
  }
}

TEST_CASE("forward shapes on the standard model") {
  Model m = Model::create(ModelConfig::standard(), 1);
  Rng rng(2);
  for (std::size_t N : {1, 2})
    for (std::size_t T : {8, 64}) {
      std::vector<BlockTrace> traces;
      Tensor logits = forward(random_tensor({N, 3, T, 25}, rng), m, {}, &traces);
      CHECK(logits.shape() == Shape{N, 60});
      REQUIRE(traces.size() == 10);
      for (std::size_t i = 0; i < 10; ++i) {
        CHECK(traces[i].output.shape() == Shape{N, m.config.channel_schedule[i], T, 25});
      }
    }
}

TEST_CASE("forward is a deterministic, batch-equivariant function in eval mode") {
  Model m = Model::create(small_model(), 3);
  Rng rng(3);
  Tensor x = random_tensor({4, 3, 6, 5}, rng);
  const auto a = vec(forward(x, m, {}));
  CHECK(a == vec(forward(x, m, {})));

  const std::size_t perm[4] = {2, 0, 3, 1};
  const std::size_t per = 3 * 6 * 5;
  std::vector<double> px(x.numel());
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < per; ++i) px[n * per + i] = x[perm[n] * per + i];
  const auto b = vec(forward(Tensor(x.shape(), px), m, {}));
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 3; ++k) CHECK(b[n * 3 + k] == doctest::Approx(a[perm[n] * 3 + k]).epsilon(1e-12));

  SUBCASE("a single sample gives the same logits alone or in a batch") {
    const auto one = vec(forward(ops::slice_axis(x, 0, 1, 2), m, {}));
    for (std::size_t k = 0; k < 3; ++k) CHECK(one[k] == doctest::Approx(a[3 + k]).epsilon(1e-12));
  }
}

TEST_CASE("model gradient check") {
  const ModelConfig c = gradcheck_model_config();
  CHECK(c.embed_dim == 4);
  CHECK(c.num_joints() == 5);
  CHECK(c.num_classes == 3);
  for (std::size_t w : c.channel_schedule) CHECK(w == 4);
  for (const auto& r : check_model({})) {
    INFO(r.name << " " << r.max_relative_error);
    CHECK(r.passed);
  }
}

TEST_CASE("argmax and predict") {
  CHECK(argmax_rows(Tensor({1, 3}, {0.1, 2.0, -1})) == std::vector<std::uint32_t>{1});
  CHECK(argmax_rows(Tensor({2, 3}, {1, 1, 0, -2, 5, 5})) == std::vector<std::uint32_t>{0, 1});
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor l = random_tensor({3, 7}, rng, -5, 5);
    std::vector<double> shifted(vec(l));
    for (std::size_t n = 0; n < 3; ++n) {
      const double s = rng.uniform(-100, 100);
      for (std::size_t k = 0; k < 7; ++k) shifted[n * 7 + k] += s;
    }
    CHECK(argmax_rows(l) == argmax_rows(Tensor({3, 7}, shifted)));
  }
  Model m = Model::create(small_model(), 5);
  Tensor x = random_tensor({3, 3, 6, 5}, rng);
  CHECK(predict(x, m) == argmax_rows(forward(x, m, {})));
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testutil::scratch_dir("model_ckpt");
  Model m = Model::create(small_model(), 6);
  Rng rng(6);
  for (auto& nt : m.params.buffers())
    for (double& v : nt.tensor.mutable_data()) v = rng.uniform(0.5, 1.5);
  round_all(m);
  save_params(dir / "a.ckpt", m);
  const ModelConfig expected = small_model();
  Model back = load_params(dir / "a.ckpt", &expected);
  CHECK(back.config == m.config);
  Tensor x = random_tensor({2, 3, 6, 5}, rng);
  CHECK(vec(forward(x, back, {})) == vec(forward(x, m, {})));
  CHECK(encode_checkpoint(back) == encode_checkpoint(m));

  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  std::vector<char> head(4);
  in.read(head.data(), 4);
  CHECK(std::string(head.begin(), head.end()) == "USTF");

  SUBCASE("mismatched schedule") {
    ModelConfig other = small_model();
    other.channel_schedule = {6, 8, 6};
    CHECK_THROWS_AS(load_params(dir / "a.ckpt", &other), ConfigError);
  }
  SUBCASE("truncation and corruption") {
    auto bytes = encode_checkpoint(m);
    for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(keep));
      CHECK_THROWS_AS(decode_checkpoint(cut), DataError);
    }
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(extra), DataError);
    CHECK_THROWS_AS(load_params(dir / "missing.ckpt"), DataError);
  }
}

TEST_CASE("config validation and JSON") {
  ModelConfig c = small_model();
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK(ModelConfig::from_json(ModelConfig::standard().to_json()) == ModelConfig::standard());
  c.num_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_model();
  c.channel_schedule = {6, 7};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"embed_dim", "wide"}}), ConfigError);
  const auto s = ModelConfig::standard();
  CHECK(s.channel_schedule.size() == 10);
  CHECK(s.num_joints() == 25);
}

TEST_CASE("T and V survive every block of the standard model") {
  Model m = Model::create(ModelConfig::standard(), 7);
  Rng rng(7);
  for (std::size_t T : {1, 3, 13}) {
    std::vector<BlockTrace> traces;
    forward(random_tensor({1, 3, T, 25}, rng), m, {}, &traces);
    for (const auto& tr : traces) {
      CHECK(tr.output.dim(2) == T);
      CHECK(tr.output.dim(3) == 25);
    }
  }
}
