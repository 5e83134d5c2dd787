#include "ustf/accounting.hpp"

#include <cstdio>
#include <sstream>

#include "ustf/errors.hpp"

namespace ustf {

namespace {

using u64 = std::uint64_t;

void add_layer(CostReport& r, std::string name, u64 params, u64 flops, u64 buffers = 0) {
  r.layers.push_back({std::move(name), params, buffers, flops});
}

void finish(CostReport& r) {
  r.total_params = r.total_buffers = r.total_flops = 0;
  for (const auto& l : r.layers) {
    r.total_params += l.params;
    r.total_buffers += l.buffers;
    r.total_flops += l.flops;
  }
}

}  // namespace

CostReport profile(const ModelConfig& config, std::size_t frames, std::size_t batch) {
  config.validate();
  if (frames == 0) throw ConfigError("profile: frames must be positive");
  if (batch == 0) throw ConfigError("profile: batch must be positive");
  CostReport r;
  r.frames = frames;
  r.batch = batch;
  r.config = config;
  const u64 N = batch, T = frames, V = config.num_joints();
  const u64 TV = T * V, VV = V * V;
  const u64 E = config.embed_dim, Cin0 = config.in_channels, K = config.num_classes;

  add_layer(r, "embed.lift", Cin0 * E + E, N * 2 * TV * Cin0 * E);
  if (config.joint_embedding) add_layer(r, "embed.joint", E * V, N * E * TV);

  for (std::size_t i = 0; const auto& bc : config.block_configs()) {
    const std::string p = "block" + std::to_string(i++) + ".";
    const u64 Cin = bc.in_channels, C = bc.out_channels, kTV = bc.kernel_t * bc.kernel_v;
    const u64 H = bc.mlp_hidden, k = bc.eca_kernel;
    const u64 width = MSPAttentionParams::input_width(V, bc.variant);

    add_layer(r, p + "sep_conv", Cin * kTV + Cin * C + C, N * 2 * TV * (Cin * kTV + Cin * C));

    // Per Q/K half: global pool emits V values, local pool emits 16V bin
    // means then V means.
    u64 pool = 0;
    if (bc.variant != AttentionVariant::LocalOnly) pool += V;
    if (bc.variant != AttentionVariant::GlobalOnly) pool += 16 * V + V;
    add_layer(r, p + "attn.pool", 0, N * 2 * pool);

    const u64 mlp_params = H * width + H + V * H + V;
    const u64 mlp_flops = 2 * width * H + H + 2 * H * V;
    add_layer(r, p + "attn.mlp_q", mlp_params, N * mlp_flops);
    add_layer(r, p + "attn.mlp_k", mlp_params, N * mlp_flops);
    add_layer(r, p + "attn.outer_softmax", 0, N * 2 * VV);
    add_layer(r, p + "fuse_topology", 1 + VV, N * 3 * VV);
    add_layer(r, p + "apply_attention", 0, N * 2 * C * T * VV);
    add_layer(r, p + "channel_refine", k, N * (C + 2 * k * C + C + 2 * C * TV));
    add_layer(r, p + "bn", 2 * C, N * 2 * C * TV, 2 * C);
    const u64 proj_params = bc.has_residual_projection() ? Cin * C + C : 0;
    const u64 proj_flops = bc.has_residual_projection() ? 2 * TV * Cin * C : 0;
    add_layer(r, p + "residual_relu", proj_params, N * (proj_flops + 2 * C * TV));
  }

  const u64 last = config.channel_schedule.empty() ? E : config.channel_schedule.back();
  add_layer(r, "gap", 0, N * last);
  add_layer(r, "head", last * K + K, N * 2 * last * K);
  finish(r);
  return r;
}

CostReport count_params(const ModelConfig& config) {
  CostReport r = profile(config, 1);
  r.frames = 0;
  for (auto& l : r.layers) l.flops = 0;
  finish(r);
  return r;
}

CostReport count_flops(const ModelConfig& config, std::size_t frames, std::size_t batch) {
  CostReport r = profile(config, frames, batch);
  for (auto& l : r.layers) l.params = l.buffers = 0;
  finish(r);
  return r;
}

std::uint64_t brute_force_param_enumeration(const ModelParams& params) {
  std::uint64_t n = 0;
  for (const auto& nt : params.parameters()) n += nt.tensor.numel();
  return n;
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json layer_list = nlohmann::json::array();
  for (const auto& l : layers) {
    layer_list.push_back({{"name", l.name}, {"params", l.params}, {"buffers", l.buffers}, {"flops", l.flops}});
  }
  return {{"convention", kFlopConvention},
          {"frames", frames},
          {"batch", batch},
          {"joints", config.num_joints()},
          {"layers", layer_list},
          {"totals", {{"params", total_params}, {"buffers", total_buffers}, {"flops", total_flops}}},
          {"config", config.to_json()}};
}

std::string CostReport::to_table() const {
  std::ostringstream os;
  os << "# " << kFlopConvention << "\n";
  os << "# frames=" << frames << " batch=" << batch << " joints=" << config.num_joints() << "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-28s %12s %7s %15s %7s\n", "layer", "params", "%par", "flops", "%flop");
  os << line;
  auto pct = [](u64 part, u64 whole) { return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole); };
  for (const auto& l : layers) {
    std::snprintf(line, sizeof(line), "%-28s %12llu %6.2f%% %15llu %6.2f%%\n", l.name.c_str(),
                  static_cast<unsigned long long>(l.params), pct(l.params, total_params),
                  static_cast<unsigned long long>(l.flops), pct(l.flops, total_flops));
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-28s %12llu %7s %15llu %7s\n", "total", static_cast<unsigned long long>(total_params),
                "", static_cast<unsigned long long>(total_flops), "");
  os << line;
  std::snprintf(line, sizeof(line), "%-28s %12llu\n", "bn running stats (buffers)",
                static_cast<unsigned long long>(total_buffers));
  os << line;
  std::snprintf(line, sizeof(line), "params: %.4f M   flops: %.4f G\n", static_cast<double>(total_params) / 1e6,
                static_cast<double>(total_flops) / 1e9);
  os << line;
  return os.str();
}

}  // namespace ustf
