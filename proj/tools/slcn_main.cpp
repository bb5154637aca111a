// Command line front end: train / eval / predict / visualize / inspect.
//
// Conventions: machine-readable key=value lines on stdout, progress and
// warnings on stderr, exit 0 on success, 2 on usage errors, 1 on runtime
// errors (one-line diagnostic). With a fixed seed every subcommand writes
// byte-identical outputs on rerun.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slcn/checkpoint.hpp"
#include "slcn/config_io.hpp"
#include "slcn/dataset.hpp"
#include "slcn/model.hpp"
#include "slcn/resample.hpp"
#include "slcn/train.hpp"
#include "slcn/viz.hpp"
#include "slcn/wav.hpp"

namespace {

using json = nlohmann::json;

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw slcn::Error("cannot open '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw slcn::Error("invalid JSON in '" + path + "'");
  return j;
}

// Paths inside a config file resolve relative to the file, not the cwd.
std::string resolve_near(const std::string& config_path, const std::string& p) {
  std::filesystem::path q(p);
  if (q.is_absolute()) return p;
  return (std::filesystem::path(config_path).parent_path() / q).string();
}

struct RunConfig {
  slcn::ModelConfig model;
  slcn::TrainConfig train;
  slcn::TaskKind task = slcn::TaskKind::multilabel;
  std::string manifest_path;
};

slcn::TaskKind parse_task(const std::string& s, const std::string& ctx) {
  if (s == "multilabel") return slcn::TaskKind::multilabel;
  if (s == "multiclass") return slcn::TaskKind::multiclass;
  throw slcn::Error(ctx + ": task must be \"multilabel\" or \"multiclass\", got \"" + s + "\"");
}

slcn::TrainConfig train_config_from_json(const json& j, const std::string& ctx) {
  using namespace slcn;
  detail::check_keys(j, ctx,
                     {"batch_size", "epochs", "optimizer", "lr", "momentum", "beta1", "beta2",
                      "adam_eps", "weight_decay", "schedule", "seed", "eval_segments"});
  TrainConfig t;
  t.batch_size = detail::opt_int(j, ctx, "batch_size", t.batch_size);
  t.epochs = detail::opt_int(j, ctx, "epochs", t.epochs);
  if (j.contains("optimizer")) {
    std::string o = detail::need_str(j, ctx, "optimizer");
    if (o == "sgd")
      t.optim.kind = OptimKind::sgd_momentum;
    else if (o == "adam")
      t.optim.kind = OptimKind::adam;
    else
      throw Error(ctx + ": optimizer must be \"sgd\" or \"adam\", got \"" + o + "\"");
  }
  t.optim.lr = detail::opt_num(j, ctx, "lr", t.optim.lr);
  t.optim.momentum = detail::opt_num(j, ctx, "momentum", t.optim.momentum);
  t.optim.beta1 = detail::opt_num(j, ctx, "beta1", t.optim.beta1);
  t.optim.beta2 = detail::opt_num(j, ctx, "beta2", t.optim.beta2);
  t.optim.eps = detail::opt_num(j, ctx, "adam_eps", t.optim.eps);
  t.optim.weight_decay = detail::opt_num(j, ctx, "weight_decay", t.optim.weight_decay);
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    std::string sctx = ctx + ".schedule";
    detail::check_keys(s, sctx, {"kind", "factor", "patience"});
    std::string kind = detail::need_str(s, sctx, "kind");
    if (kind == "constant")
      t.schedule.kind = ScheduleConfig::Kind::constant;
    else if (kind == "step_decay")
      t.schedule.kind = ScheduleConfig::Kind::step_decay;
    else
      throw Error(sctx + ": kind must be \"constant\" or \"step_decay\", got \"" + kind + "\"");
    t.schedule.factor = detail::opt_num(s, sctx, "factor", t.schedule.factor);
    t.schedule.patience = detail::opt_int(s, sctx, "patience", t.schedule.patience);
  }
  t.seed = static_cast<std::uint64_t>(detail::opt_int(j, ctx, "seed",
                                                      static_cast<std::int64_t>(t.seed)));
  t.eval_segments = detail::opt_int(j, ctx, "eval_segments", t.eval_segments);
  return t;
}

RunConfig run_config_from_file(const std::string& path) {
  using namespace slcn;
  json j = load_json_file(path);
  const std::string ctx = "run config";
  detail::check_keys(j, ctx, {"model", "train", "data"});
  if (!j.contains("model")) throw Error(ctx + ": missing 'model'");
  if (!j.contains("data")) throw Error(ctx + ": missing 'data'");

  RunConfig rc;
  rc.model = model_config_from_json(j["model"], ctx + ".model");
  if (j.contains("train")) rc.train = train_config_from_json(j["train"], ctx + ".train");

  const json& d = j["data"];
  const std::string dctx = ctx + ".data";
  detail::check_keys(d, dctx, {"manifest", "task"});
  rc.manifest_path = resolve_near(path, detail::need_str(d, dctx, "manifest"));
  rc.task = parse_task(detail::need_str(d, dctx, "task"), dctx);
  return rc;
}

// Task kind implied by the head: sigmoid scores are per-class tag
// probabilities, softmax scores pick one class.
slcn::TaskKind task_of(const slcn::ModelConfig& cfg) {
  return cfg.head.output == slcn::OutputKind::sigmoid_multilabel ? slcn::TaskKind::multilabel
                                                                 : slcn::TaskKind::multiclass;
}

std::string class_label(const slcn::CheckpointMeta& meta, std::int64_t c) {
  if (c >= 0 && c < static_cast<std::int64_t>(meta.labels.size()))
    return meta.labels[static_cast<std::size_t>(c)];
  return "class" + std::to_string(c);
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed) {
  RunConfig rc = run_config_from_file(config_path);
  if (seed) rc.train.seed = *seed;

  slcn::Manifest manifest = slcn::load_manifest(rc.manifest_path);
  slcn::TrainResult result =
      slcn::train_model<float>(rc.model, rc.train, manifest, rc.task, &std::cerr);

  std::filesystem::create_directories(out_dir);
  std::string ckpt_path = out_dir + "/checkpoint.slcn";
  std::string csv_path = out_dir + "/metrics.csv";
  slcn::save_checkpoint(result.best, ckpt_path);
  slcn::write_metric_csv(csv_path, result.log);

  std::cout << "best_epoch=" << result.best_epoch << '\n'
            << "best_" << result.metric_name << '=' << slcn::format_value(result.best_metric)
            << '\n'
            << "checkpoint=" << ckpt_path << '\n'
            << "metrics=" << csv_path << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& split_str, std::optional<double> threshold,
             std::int64_t segments, const std::string& out_dir) {
  slcn::Checkpoint ckpt = slcn::load_checkpoint(ckpt_path);
  slcn::Model<float> model = slcn::model_from_checkpoint<float>(ckpt);
  slcn::Manifest manifest = slcn::load_manifest(manifest_path);
  if (!ckpt.meta.labels.empty() && ckpt.meta.labels != manifest.labels)
    throw slcn::Error("eval: manifest vocabulary does not match checkpoint labels");
  slcn::Split split = slcn::parse_split(split_str);

  slcn::ClipStore store(manifest, static_cast<int>(model.config.sample_rate));
  slcn::EvalResult res = slcn::evaluate_split(model, manifest, store, split, task_of(model.config),
                                              segments, threshold);

  std::vector<slcn::LogRow> rows;
  for (const auto& [name, value] : res.metrics) {
    std::cout << name << '=' << slcn::format_value(value) << '\n';
    rows.push_back({ckpt.meta.epoch, split_str, name, value});
  }
  if (res.auc_excluded > 0)
    std::cerr << "warning: " << res.auc_excluded
              << " single-valued class(es) excluded from macro AUC\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    slcn::write_metric_csv(out_dir + "/eval_" + split_str + ".csv", rows);
  }
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& wav_path, std::int64_t topk,
                std::int64_t segments) {
  slcn::Checkpoint ckpt = slcn::load_checkpoint(ckpt_path);
  slcn::Model<float> model = slcn::model_from_checkpoint<float>(ckpt);

  slcn::Waveform wav = slcn::load_wav(wav_path);
  if (wav.sample_rate != static_cast<int>(model.config.sample_rate))
    wav = slcn::resample(wav, static_cast<int>(model.config.sample_rate));
  std::vector<double> scores = slcn::predict_clip(model, wav.samples, segments);

  auto classes = static_cast<std::int64_t>(scores.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(classes));
  std::iota(order.begin(), order.end(), 0);
  if (topk > 0) {
    std::stable_sort(order.begin(), order.end(), [&scores](std::int64_t a, std::int64_t b) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    if (topk < classes) order.resize(static_cast<std::size_t>(topk));
  }
  for (auto c : order)
    std::cout << class_label(ckpt.meta, c) << '='
              << slcn::format_value(scores[static_cast<std::size_t>(c)]) << '\n';
  return 0;
}

int cmd_visualize(const std::string& ckpt_path, std::int64_t layer, const std::string& out_dir,
                  const slcn::VizConfig& viz, int workers) {
  slcn::Checkpoint ckpt = slcn::load_checkpoint(ckpt_path);
  slcn::Model<float> model = slcn::model_from_checkpoint<float>(ckpt);
  slcn::validate_viz_geometry(model.config);

  slcn::SpectrumSheet sheet = slcn::make_sheet(model, layer, viz, workers);
  slcn::emit_sheet(sheet, out_dir);

  std::int64_t dead = 0;
  for (auto d : sheet.dead) dead += d;
  if (dead > 0)
    std::cerr << "warning: " << dead << " of " << sheet.dead.size()
              << " filters are dead (flat gradient at init)\n";
  std::string base = out_dir + "/layer" + std::to_string(layer);
  std::cout << "csv=" << base << ".csv\n"
            << "pgm=" << base << ".pgm\n";
  return 0;
}

int cmd_inspect(const std::string& config_path) {
  json j = load_json_file(config_path);
  if (!j.is_object()) throw slcn::Error("inspect: config must be a JSON object");
  // Accepts a bare model config or a full run config with a "model" section.
  slcn::ModelConfig cfg = j.contains("model")
                              ? slcn::model_config_from_json(j["model"], "run config.model")
                              : slcn::model_config_from_json(j, "model config");

  std::vector<std::int64_t> trace = slcn::extent_trace(cfg);
  std::cout << "input_len=" << cfg.input_len << '\n'
            << "sample_rate=" << cfg.sample_rate << '\n'
            << "n_blocks=" << cfg.blocks.size() << '\n';
  std::cout << "stem_extent=" << trace[0] << '\n'
            << "stem_receptive_field=" << slcn::receptive_field(cfg, -1) << '\n';
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    auto bi = static_cast<std::int64_t>(i);
    std::cout << "block" << i << "_extent=" << trace[i + 1] << '\n'
              << "block" << i << "_receptive_field=" << slcn::receptive_field(cfg, bi) << '\n';
  }
  std::cout << "total_downsampling=" << slcn::total_downsampling(cfg) << '\n'
            << "final_extent=" << trace.back() << '\n';

  slcn::Model<float> model = slcn::build_model<float>(cfg, 0);
  std::int64_t params = 0;
  for (auto& t : model.trainable()) params += t.numel();
  std::cout << "trainable_params=" << params << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sample-level waveform classifiers"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model from a run config");
  std::string train_config, train_out;
  std::int64_t train_seed = -1;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--seed", train_seed, "override the config seed");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out = ".";
  double eval_threshold = -1.0;
  std::int64_t eval_segments = 0;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest (JSONL)")->required();
  eval->add_option("--split", eval_split, "train|valid|test (default test)");
  eval->add_option("--threshold", eval_threshold, "binarization threshold for instance F1");
  eval->add_option("--segments", eval_segments, "segments per clip (0: cover the clip)");
  eval->add_option("--out", eval_out, "directory for the metric CSV ('' to skip)");

  // predict
  auto* predict = app.add_subcommand("predict", "score one WAV clip");
  std::string pred_ckpt, pred_wav;
  std::int64_t pred_topk = 0, pred_segments = 0;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--wav", pred_wav, "input WAV file")->required();
  predict->add_option("--topk", pred_topk, "print only the k best classes");
  predict->add_option("--segments", pred_segments, "segments per clip (0: cover the clip)");

  // visualize
  auto* viz = app.add_subcommand("visualize", "gradient-ascent filter spectra for one layer");
  std::string viz_ckpt, viz_out;
  std::int64_t viz_layer = 0;
  slcn::VizConfig viz_cfg;
  int viz_workers = 1;
  viz->add_option("--checkpoint", viz_ckpt, "checkpoint file")->required();
  viz->add_option("--layer", viz_layer, "1 = stem output, 1+k = block k output")->required();
  viz->add_option("--out", viz_out, "output directory")->required();
  viz->add_option("--steps", viz_cfg.steps, "ascent steps");
  viz->add_option("--step-size", viz_cfg.step_size, "initial ascent step size");
  viz->add_option("--l2", viz_cfg.l2, "input L2 penalty");
  viz->add_option("--noise-len", viz_cfg.noise_len, "input length in samples");
  viz->add_option("--noise-scale", viz_cfg.noise_scale, "init noise stddev");
  viz->add_option("--seed", viz_cfg.seed, "base seed");
  viz->add_option("--workers", viz_workers, "worker threads");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "extent trace and receptive fields of a config");
  std::string inspect_config;
  inspect->add_option("--config", inspect_config, "model config or run config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);  // prints help or the usage error
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train)
      return cmd_train(train_config, train_out,
                       train_seed >= 0 ? std::optional<std::uint64_t>(
                                             static_cast<std::uint64_t>(train_seed))
                                       : std::nullopt);
    if (*eval)
      return cmd_eval(eval_ckpt, eval_manifest, eval_split,
                      eval_threshold >= 0 ? std::optional<double>(eval_threshold) : std::nullopt,
                      eval_segments, eval_out);
    if (*predict) return cmd_predict(pred_ckpt, pred_wav, pred_topk, pred_segments);
    if (*viz) return cmd_visualize(viz_ckpt, viz_layer, viz_out, viz_cfg, viz_workers);
    if (*inspect) return cmd_inspect(inspect_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
