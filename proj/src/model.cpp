#include "ustf/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "ustf/dataset.hpp"
#include "ustf/errors.hpp"

namespace ustf {

ModelConfig ModelConfig::standard() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.num_classes = 4;
  c.embed_dim = 16;
  c.channel_schedule = {16, 16};
  c.mlp_hidden = 32;
  return c;
}

void ModelConfig::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  for (const auto& bc : block_configs()) bc.validate();
}

std::vector<BlockConfig> ModelConfig::block_configs() const {
  std::vector<BlockConfig> out;
  std::size_t in = embed_dim;
  for (std::size_t width : channel_schedule) {
    BlockConfig bc;
    bc.in_channels = in;
    bc.out_channels = width;
    bc.kernel_t = kernel_t;
    bc.kernel_v = kernel_v;
    bc.mlp_hidden = mlp_hidden;
    bc.dropout = dropout;
    bc.eca_kernel = eca_kernel;
    bc.variant = variant;
    bc.alpha_init = alpha_init;
    out.push_back(bc);
    in = width;
  }
  return out;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"graph", graph_to_json(graph)},
          {"in_channels", in_channels},
          {"num_classes", num_classes},
          {"embed_dim", embed_dim},
          {"channel_schedule", channel_schedule},
          {"kernel_t", kernel_t},
          {"kernel_v", kernel_v},
          {"mlp_hidden", mlp_hidden},
          {"dropout", dropout},
          {"eca_kernel", eca_kernel},
          {"attention_variant", to_string(variant)},
          {"joint_embedding", joint_embedding},
          {"alpha_init", alpha_init}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }

ModelConfig ModelConfig::from_json(const nlohmann::json& j, ModelConfig c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "graph") {
        c.graph = graph_from_json(value);
      } else if (key == "in_channels") {
        c.in_channels = value.get<std::size_t>();
      } else if (key == "num_classes") {
        c.num_classes = value.get<std::uint32_t>();
      } else if (key == "embed_dim") {
        c.embed_dim = value.get<std::size_t>();
      } else if (key == "channel_schedule") {
        c.channel_schedule = value.get<std::vector<std::size_t>>();
      } else if (key == "kernel_t") {
        c.kernel_t = value.get<std::size_t>();
      } else if (key == "kernel_v") {
        c.kernel_v = value.get<std::size_t>();
      } else if (key == "mlp_hidden") {
        c.mlp_hidden = value.get<std::size_t>();
      } else if (key == "dropout") {
        c.dropout = value.get<double>();
      } else if (key == "eca_kernel") {
        c.eca_kernel = value.get<std::size_t>();
      } else if (key == "attention_variant") {
        c.variant = attention_variant_from_string(value.get<std::string>());
      } else if (key == "joint_embedding") {
        c.joint_embedding = value.get<bool>();
      } else if (key == "alpha_init") {
        c.alpha_init = value.get<double>();
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  } catch (const GraphError& e) {
    throw ConfigError(std::string("model config graph: ") + e.what());
  }
  c.validate();
  return c;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng::derive(seed, 0);
  const std::size_t E = config.embed_dim, V = config.num_joints();
  ModelParams p;
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(config.in_channels));
  p.embed_weight = uniform_param({E, config.in_channels}, in_bound, rng);
  p.embed_bias = uniform_param({E}, in_bound, rng);
  if (config.joint_embedding) p.joint_embed = uniform_param({E, V}, 0.1, rng);
  for (const auto& bc : config.block_configs()) p.blocks.push_back(BlockParams::init(bc, config.graph, rng));
  const std::size_t last = config.channel_schedule.empty() ? E : config.channel_schedule.back();
  const double head_bound = 1.0 / std::sqrt(static_cast<double>(last));
  p.head_weight = uniform_param({config.num_classes, last}, head_bound, rng);
  p.head_bias = uniform_param({config.num_classes}, head_bound, rng);
  return p;
}

std::vector<NamedTensor> ModelParams::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embed.weight", embed_weight});
  out.push_back({"embed.bias", embed_bias});
  if (joint_embed.defined()) out.push_back({"embed.joint", joint_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_parameters("block" + std::to_string(i), out);
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

std::vector<NamedTensor> ModelParams::buffers() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_buffers("block" + std::to_string(i), out);
  return out;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  return Model{config, ModelParams::init(config, seed)};
}

Tensor add_joint_embedding(const Tensor& x, const Tensor& embedding) {
  if (x.rank() != 4 || embedding.rank() != 2 || embedding.dim(0) != x.dim(1) || embedding.dim(1) != x.dim(3)) {
    throw ShapeError("add_joint_embedding: embedding " + shape_str(embedding.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), E = x.dim(1), T = x.dim(2), V = x.dim(3);
  const auto xd = x.data();
  const auto ed = embedding.data();
  std::vector<double> y(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v) {
          const std::size_t i = ((n * E + e) * T + t) * V + v;
          y[i] = xd[i] + ed[e * V + v];
        }
  record_flops(y.size());
  return Tensor::from_op("add_joint_embedding", x.shape(), std::move(y), {x, embedding},
                         [N, E, T, V](detail::Node& out) {
                           if (out.parents[0]->requires_grad) {
                             auto& gx = out.parents[0]->grad_buffer();
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out.grad[i];
                           }
                           if (out.parents[1]->requires_grad) {
                             auto& ge = out.parents[1]->grad_buffer();
                             for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t e = 0; e < E; ++e)
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t v = 0; v < V; ++v)
                                     ge[e * V + v] += out.grad[((n * E + e) * T + t) * V + v];
                           }
                         });
}

Tensor embed(const Tensor& x, const ModelParams& params) {
  if (x.rank() != 4 || x.dim(1) != params.embed_weight.dim(1)) {
    throw ShapeError("embed: expected [N," + std::to_string(params.embed_weight.dim(1)) + ",T,V] input, got " +
                     shape_str(x.shape()));
  }
  Tensor h = ops::pointwise_conv(x, params.embed_weight, params.embed_bias);
  if (params.joint_embed.defined()) h = add_joint_embedding(h, params.joint_embed);
  return h;
}

Tensor forward(const Tensor& x, Model& model, const ForwardContext& ctx, std::vector<BlockTrace>* traces) {
  if (x.rank() != 4 || x.dim(3) != model.config.num_joints()) {
    throw ShapeError("forward: expected [N," + std::to_string(model.config.in_channels) + ",T," +
                     std::to_string(model.config.num_joints()) + "] input, got " + shape_str(x.shape()));
  }
  Tensor h = embed(x, model.params);
  if (traces != nullptr) traces->clear();
  for (auto& block : model.params.blocks) {
    BlockTrace trace;
    h = block_forward(h, block, ctx, traces != nullptr ? &trace : nullptr);
    if (traces != nullptr) traces->push_back(std::move(trace));
  }
  Tensor pooled = ops::avg_pool_axes(h, {2, 3});
  return ops::linear(pooled, model.params.head_weight, model.params.head_bias);
}

std::vector<std::uint32_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N,K] logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const auto d = logits.data();
  std::vector<std::uint32_t> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (d[n * K + k] > d[n * K + best]) best = k;
    }
    out[n] = static_cast<std::uint32_t>(best);
  }
  return out;
}

std::vector<std::uint32_t> predict(const Tensor& x, Model& model) {
  NoGradGuard no_grad;
  return argmax_rows(forward(x, model, {Mode::Eval, nullptr}));
}

namespace {

constexpr char kCheckpointMagic[4] = {'U', 'S', 'T', 'F'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint: truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<NamedTensor> checkpoint_tensors(const ModelParams& p) {
  auto all = p.parameters();
  auto bufs = p.buffers();
  all.insert(all.end(), bufs.begin(), bufs.end());
  return all;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = model.config.to_json().dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  for (const auto& nt : checkpoint_tensors(model.params)) {
    put_u32(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : nt.tensor.data()) {
      if (!std::isfinite(v)) throw NumericError("checkpoint: non-finite value in " + nt.name);
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

void save_params(const std::filesystem::path& path, const Model& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const ModelConfig* expected) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t cfg_len = r.u32();
  const std::uint8_t* cfg_bytes = r.take(cfg_len);
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(cfg_bytes, cfg_bytes + cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: corrupt config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: invalid config block: ") + e.what());
  }
  if (expected != nullptr && !(config == *expected)) {
    throw ConfigError("checkpoint config does not match the expected model config");
  }
  Model model = Model::create(config, 0);
  for (auto& nt : checkpoint_tensors(model.params)) {
    const std::uint32_t rank = r.u32();
    if (rank != nt.tensor.rank()) throw DataError("checkpoint: rank mismatch for " + nt.name);
    for (std::size_t d = 0; d < rank; ++d) {
      if (r.u32() != nt.tensor.dim(d)) throw DataError("checkpoint: shape mismatch for " + nt.name);
    }
    auto dst = nt.tensor.mutable_data();
    const std::uint8_t* p = r.take(4 * dst.size());
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
      const float v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw DataError("checkpoint: non-finite value in " + nt.name);
      dst[i] = static_cast<double>(v);
    }
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return model;
}

Model load_params(const std::filesystem::path& path, const ModelConfig* expected) {
  return decode_checkpoint(read_file(path), expected);
}

}  // namespace ustf
