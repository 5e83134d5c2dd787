// ustf command-line driver.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
// error, 3 numeric failure (NaN during training, failed gradient check).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ustf/accounting.hpp"
#include "ustf/dataset.hpp"
#include "ustf/errors.hpp"
#include "ustf/gradcheck_suite.hpp"
#include "ustf/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ustf;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Settings shared by every subcommand that builds a model.
struct ConfigFlags {
  std::string config_path;
  std::string preset = "standard";
  std::optional<std::string> variant;
  std::optional<std::size_t> hidden;

  void add_to(CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file with optional \"model\" and \"train\" objects");
    sub->add_option("--preset", preset, "base configuration")->check(CLI::IsMember({"standard", "tiny"}));
    sub->add_option("--variant", variant, "attention pooling variant")
        ->check(CLI::IsMember({"global_only", "local_only", "combined"}));
    sub->add_option("--hidden", hidden, "attention MLP hidden width");
  }
};

struct Resolved {
  ModelConfig model;
  TrainConfig train;
  json model_json = json::object();  // model keys given in the file
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

Resolved resolve(const ConfigFlags& f) {
  Resolved r;
  const bool tiny = f.preset == "tiny";
  r.model = tiny ? ModelConfig::tiny() : ModelConfig::standard();
  r.train = tiny ? TrainConfig::tiny() : TrainConfig{};
  if (!f.config_path.empty()) {
    const json j = read_json_file(f.config_path);
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key != "model" && key != "train") throw ConfigError("unknown config section '" + key + "'");
    }
    if (j.contains("model")) {
      r.model_json = j["model"];
      r.model = ModelConfig::from_json(r.model_json, r.model);
    }
    if (j.contains("train")) r.train = TrainConfig::from_json(j["train"], r.train);
  }
  if (f.variant) r.model.variant = attention_variant_from_string(*f.variant);
  if (f.hidden) r.model.mlp_hidden = *f.hidden;
  r.model.validate();
  return r;
}

void echo(const std::string& command, const json& resolved) {
  std::cerr << "# " << command << " " << resolved.dump() << "\n";
}

// Dataset-derived settings fill whatever the config file left unset.
void adopt_dataset(Resolved& r, const Dataset& ds) {
  if (!r.model_json.contains("num_classes")) r.model.num_classes = ds.manifest.num_classes;
  if (!r.model_json.contains("graph")) r.model.graph = ds.manifest.graph;
  r.model.validate();
  if (r.model.num_classes != ds.manifest.num_classes) {
    throw ConfigError("model has " + std::to_string(r.model.num_classes) + " classes, dataset has " +
                      std::to_string(ds.manifest.num_classes));
  }
  if (!(r.model.graph == ds.manifest.graph)) throw ConfigError("model graph differs from the dataset graph");
}

int cmd_gen(const SynthOptions& opts, const std::string& out_dir) {
  echo("gen", {{"seed", opts.seed},
               {"classes", opts.num_classes},
               {"per_class", opts.samples_per_class},
               {"frames", opts.frames},
               {"noise", opts.noise_stddev},
               {"out_dir", out_dir}});
  if (opts.num_classes < 2) throw ConfigError("--classes must be at least 2");
  if (opts.samples_per_class == 0) throw ConfigError("--per-class must be positive");
  if (opts.frames == 0) throw ConfigError("--frames must be positive");
  // The generator needs 8 frames for one full motion cycle; shorter requests
  // are subsampled from an 8-frame render.
  SynthOptions render = opts;
  render.frames = std::max<std::size_t>(opts.frames, 8);
  Dataset ds = synth_dataset(render, ntu_graph());
  if (render.frames != opts.frames) {
    for (auto& seq : ds.sequences) seq = fit_frames(seq, opts.frames);
  }
  write_dataset(out_dir, ds);
  std::printf("wrote %zu sequences to %s\n", ds.sequences.size(), out_dir.c_str());
  return kOk;
}

struct TrainFlags {
  ConfigFlags config;
  std::string data, out_checkpoint, metrics_csv, init_checkpoint, timing = "on";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, frames;
  std::optional<double> lr;
};

int cmd_train(const TrainFlags& f) {
  Resolved r = resolve(f.config);
  if (f.seed) r.train.seed = *f.seed;
  if (f.epochs) r.train.epochs = *f.epochs;
  if (f.batch_size) r.train.batch_size = *f.batch_size;
  if (f.frames) r.train.frames = *f.frames;
  if (f.lr) r.train.lr = *f.lr;
  r.train.validate();
  if (!fs::is_directory(f.data)) throw DataError("data directory " + f.data + " does not exist");
  const Dataset ds = load_dataset(f.data);
  adopt_dataset(r, ds);

  Model model = f.init_checkpoint.empty() ? Model::create(r.model, r.train.seed)
                                          : load_params(f.init_checkpoint, &r.model);
  echo("train", {{"model", r.model.to_json()},
                 {"train", r.train.to_json()},
                 {"data", f.data},
                 {"out_checkpoint", f.out_checkpoint},
                 {"metrics_csv", f.metrics_csv},
                 {"init_checkpoint", f.init_checkpoint},
                 {"timing", f.timing}});

  std::ofstream csv;
  if (!f.metrics_csv.empty()) {
    csv.open(f.metrics_csv, std::ios::trunc);
    if (!csv) throw DataError("cannot write " + f.metrics_csv);
    csv << metrics_csv_header() << "\n";
  }
  const bool timing = f.timing == "on";
  train_loop(model, ds, r.train, [&](const EpochMetrics& m) {
    if (csv.is_open()) csv << metrics_csv_row(m, timing) << std::endl;
    std::fprintf(stderr, "epoch %zu loss %.6f top1 %.4f\n", m.epoch, m.loss, m.top1);
  });
  save_params(f.out_checkpoint, model);
  return kOk;
}

int cmd_eval(const std::string& data, const std::string& checkpoint, std::size_t batch, std::size_t frames) {
  echo("eval", {{"data", data}, {"checkpoint", checkpoint}, {"batch_size", batch}, {"frames", frames}});
  if (!fs::is_directory(data)) throw DataError("data directory " + data + " does not exist");
  Model model = load_params(checkpoint);
  const Dataset ds = load_dataset(data);
  if (ds.manifest.num_classes != model.config.num_classes || !(ds.manifest.graph == model.config.graph)) {
    throw DataError("dataset does not match the checkpoint's classes or graph");
  }
  const EpochMetrics m = evaluate(model, ds, batch, frames);
  std::printf("%s\n", json{{"samples", ds.sequences.size()},
                           {"loss", m.loss},
                           {"top1", m.top1}}.dump().c_str());
  return kOk;
}

int cmd_profile(const ConfigFlags& cf, std::size_t frames, std::size_t batch, const std::string& format) {
  const Resolved r = resolve(cf);
  echo("profile", {{"model", r.model.to_json()}, {"frames", frames}, {"batch", batch}, {"format", format}});
  const CostReport report = profile(r.model, frames, batch);
  if (format == "json") {
    std::printf("%s\n", report.to_json().dump(2).c_str());
  } else {
    std::fputs(report.to_table().c_str(), stdout);
  }
  return kOk;
}

int cmd_gradcheck(const std::string& scope, const SuiteOptions& opts) {
  echo("gradcheck", {{"scope", scope}, {"tol", opts.tol}, {"step", opts.step}, {"corrupt", opts.corrupt_factor}});
  std::vector<GradScope> scopes;
  if (scope == "op" || scope == "all") scopes.push_back(GradScope::Op);
  if (scope == "block" || scope == "all") scopes.push_back(GradScope::Block);
  if (scope == "model" || scope == "all") scopes.push_back(GradScope::Model);
  std::size_t failures = 0, total = 0;
  const GradCheckReport* worst = nullptr;
  std::vector<GradCheckReport> reports;
  for (GradScope s : scopes) {
    auto part = run_gradcheck(s, opts);
    reports.insert(reports.end(), part.begin(), part.end());
  }
  for (const auto& r : reports) {
    ++total;
    if (!r.passed) ++failures;
    if (worst == nullptr || r.max_relative_error > worst->max_relative_error) worst = &r;
    std::printf("%-4s %-48s %.3e  (index %zu)\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_relative_error,
                r.worst_index);
  }
  if (worst != nullptr) {
    std::printf("%zu/%zu passed; worst %s at %.3e (tol %.1e)\n", total - failures, total, worst->name.c_str(),
                worst->max_relative_error, opts.tol);
  }
  return failures == 0 ? kOk : kNumeric;
}

struct ExportFlags {
  std::string checkpoint, input, out;
  std::size_t block_index = 0;
  std::size_t frames = 0;
  bool pre_fusion = false;
  bool force_alpha_zero = false;
};

int cmd_attn_export(const ExportFlags& f) {
  echo("attn-export", {{"checkpoint", f.checkpoint},
                       {"input", f.input},
                       {"block_index", f.block_index},
                       {"out", f.out},
                       {"frames", f.frames},
                       {"pre_fusion", f.pre_fusion},
                       {"force_alpha_zero", f.force_alpha_zero}});
  Model model = load_params(f.checkpoint);
  if (f.block_index >= model.params.blocks.size()) {
    throw ConfigError("--block-index " + std::to_string(f.block_index) + " out of range; model has " +
                      std::to_string(model.params.blocks.size()) + " blocks");
  }
  SkeletonSequence seq = read_skel(f.input);
  if (seq.joints != model.config.num_joints() || seq.channels != model.config.in_channels) {
    throw DataError("input sequence shape does not match the checkpoint's model");
  }
  if (f.frames != 0) seq = fit_frames(seq, f.frames);
  if (f.force_alpha_zero) {
    for (auto& b : model.params.blocks) b.alpha.mutable_data()[0] = 0.0;
  }
  std::vector<BlockTrace> traces;
  {
    NoGradGuard no_grad;
    forward(stack_batch({&seq}), model, {Mode::Eval, nullptr}, &traces);
  }
  const Tensor& map = f.pre_fusion ? traces[f.block_index].attention : traces[f.block_index].fused;
  const std::size_t V = model.config.num_joints();
  const auto d = map.data();
  std::string text;
  char cell[32];
  for (std::size_t i = 0; i < V; ++i) {
    for (std::size_t j = 0; j < V; ++j) {
      std::snprintf(cell, sizeof(cell), "%.9g", d[i * V + j]);
      if (j > 0) text += ',';
      text += cell;
    }
    text += '\n';
  }
  write_file_atomic(f.out, std::vector<std::uint8_t>(text.begin(), text.end()));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified spatial-temporal attention for skeleton action recognition"};
  app.require_subcommand(1);

  SynthOptions gen_opts;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "write a synthetic skeleton dataset");
  gen->add_option("--seed", gen_opts.seed, "generator seed")->capture_default_str();
  gen->add_option("--classes", gen_opts.num_classes, "number of classes")->capture_default_str();
  gen->add_option("--per-class", gen_opts.samples_per_class, "samples per class")->capture_default_str();
  gen->add_option("--frames", gen_opts.frames, "frames per sequence")->capture_default_str();
  gen->add_option("--noise", gen_opts.noise_stddev, "Gaussian noise stddev")->capture_default_str();
  gen->add_option("--out-dir", gen_out, "output directory")->required();

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  tf.config.add_to(train);
  train->add_option("--data", tf.data, "dataset directory (manifest.json)")->required();
  train->add_option("--seed", tf.seed, "seed for init, shuffling and dropout");
  train->add_option("--epochs", tf.epochs, "number of epochs");
  train->add_option("--batch-size", tf.batch_size, "mini-batch size");
  train->add_option("--frames", tf.frames, "pad or subsample sequences to this length");
  train->add_option("--lr", tf.lr, "base learning rate");
  train->add_option("--out-checkpoint", tf.out_checkpoint, "checkpoint to write")->required();
  train->add_option("--metrics-csv", tf.metrics_csv, "per-epoch metrics CSV");
  train->add_option("--init-checkpoint", tf.init_checkpoint, "start from this checkpoint instead of a fresh init");
  train->add_option("--timing", tf.timing, "write wall time to the CSV (off writes 0)")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();

  std::string eval_data, eval_ckpt;
  std::size_t eval_batch = 128, eval_frames = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--batch-size", eval_batch, "batch size")->capture_default_str();
  eval->add_option("--frames", eval_frames, "pad or subsample sequences (0 keeps length)")->capture_default_str();

  ConfigFlags prof_cfg;
  std::size_t prof_frames = 64, prof_batch = 1;
  std::string prof_format = "table";
  auto* prof = app.add_subcommand("profile", "parameter and FLOP report");
  prof_cfg.add_to(prof);
  prof->add_option("--frames", prof_frames, "frames per sample")->capture_default_str();
  prof->add_option("--batch", prof_batch, "samples per forward pass")->capture_default_str();
  prof->add_option("--format", prof_format, "output format")
      ->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();

  std::string gc_scope = "all";
  SuiteOptions gc_opts;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite (float64)");
  gc->add_option("--scope", gc_scope, "which checks to run")
      ->check(CLI::IsMember({"op", "block", "model", "all"}))
      ->capture_default_str();
  gc->add_option("--tol", gc_opts.tol, "maximum relative error")->capture_default_str();
  gc->add_option("--step", gc_opts.step, "central-difference step")->capture_default_str();
  gc->add_option("--corrupt", gc_opts.corrupt_factor, "debug: scale analytic gradients by this factor")
      ->capture_default_str();

  ExportFlags ef;
  auto* exp = app.add_subcommand("attn-export", "write one block's attention map for one sample as CSV");
  exp->add_option("--checkpoint", ef.checkpoint, "model checkpoint")->required();
  exp->add_option("--input", ef.input, "SKEL sequence")->required();
  exp->add_option("--block-index", ef.block_index, "block to export")->capture_default_str();
  exp->add_option("--out", ef.out, "CSV file to write")->required();
  exp->add_option("--frames", ef.frames, "pad or subsample the input (0 keeps length)")->capture_default_str();
  exp->add_flag("--pre-fusion", ef.pre_fusion, "export the dynamic map before topology fusion");
  exp->add_flag("--force-alpha-zero", ef.force_alpha_zero, "debug: set every fusion weight to 0");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_opts, gen_out);
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(eval_data, eval_ckpt, eval_batch, eval_frames);
    if (*prof) return cmd_profile(prof_cfg, prof_frames, prof_batch, prof_format);
    if (*gc) return cmd_gradcheck(gc_scope, gc_opts);
    if (*exp) return cmd_attn_export(ef);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const GraphError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
