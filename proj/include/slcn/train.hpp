#pragma once

// Training loop, clip-level prediction, and split evaluation.
//
// Clips are consumed as fixed-length segments of config.input_len samples.
// Training draws one uniformly random segment per clip per epoch; evaluation
// averages class scores over evenly spaced segments (ceil(clip/segment) of
// them unless overridden). Everything downstream of the seed is
// deterministic: rerunning a training produces an identical metric log.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slcn/checkpoint.hpp"
#include "slcn/dataset.hpp"
#include "slcn/metrics.hpp"
#include "slcn/model.hpp"
#include "slcn/optim.hpp"
#include "slcn/tensor.hpp"

namespace slcn {

enum class TaskKind { multilabel, multiclass };

struct ScheduleConfig {
  enum class Kind { constant, step_decay };
  Kind kind = Kind::step_decay;
  double factor = 0.2;
  std::int64_t patience = 3;  // epochs without improvement before a decay
};

struct TrainConfig {
  std::int64_t batch_size = 16;
  std::int64_t epochs = 10;
  OptimConfig optim;
  ScheduleConfig schedule;
  std::uint64_t seed = 1234;
  std::int64_t eval_segments = 0;  // 0: ceil(clip/segment) per clip
};

struct LogRow {
  std::int64_t epoch;
  std::string split;
  std::string metric;
  double value;
};

/// Lossless and stable: the same double always prints the same bytes.
inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metric_csv(const std::string& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("write_metric_csv: cannot open '" + path + "'");
  out << "epoch,split,metric,value\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.split << ',' << r.metric << ',' << format_value(r.value) << '\n';
  if (!out) throw Error("write_metric_csv: write failed for '" + path + "'");
}

namespace detail {

template <class T>
Tensor<T> segment_to_input(const std::vector<float>& segment) {
  std::vector<T> data(segment.size());
  for (std::size_t i = 0; i < segment.size(); ++i) data[i] = static_cast<T>(segment[i]);
  return Tensor<T>::from({1, 1, static_cast<std::int64_t>(segment.size())}, std::move(data));
}

}  // namespace detail

/// Mean of per-segment class scores over evenly spaced segments of one clip.
template <class T>
std::vector<double> predict_clip(Model<T>& model, const std::vector<float>& samples,
                                 std::int64_t n_segments = 0) {
  if (samples.empty()) throw Error("predict_clip: empty waveform");
  NoGradGuard ng;
  std::int64_t seg_len = model.config.input_len;
  auto clip_len = static_cast<std::int64_t>(samples.size());
  std::int64_t n = n_segments > 0 ? n_segments : default_segment_count(clip_len, seg_len);
  SegmentPlan plan = plan_segments(clip_len, seg_len, n);

  std::vector<double> sums(static_cast<std::size_t>(model.config.head.n_classes), 0.0);
  for (std::size_t i = 0; i < plan.offsets.size(); ++i) {
    Tensor<T> x = detail::segment_to_input<T>(extract_segment(samples, plan, i));
    Tensor<T> s = model.scores(x, Mode::infer);
    for (std::size_t c = 0; c < sums.size(); ++c) sums[c] += static_cast<double>(s.data()[c]);
  }
  for (auto& v : sums) v /= static_cast<double>(plan.offsets.size());
  return sums;
}

struct EvalResult {
  std::vector<std::pair<std::string, double>> metrics;  // emission order
  std::int64_t auc_excluded = 0;

  double get(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    throw Error("eval: no metric '" + name + "'");
  }
};

namespace detail {

template <class T>
void check_task(const Manifest& manifest, const ModelConfig& cfg, TaskKind task) {
  if (task == TaskKind::multilabel && cfg.head.output != OutputKind::sigmoid_multilabel)
    throw Error("eval: multilabel task needs a sigmoid head");
  if (task == TaskKind::multiclass && cfg.head.output != OutputKind::softmax_multiclass)
    throw Error("eval: multiclass task needs a softmax head");
  auto vocab = static_cast<std::int64_t>(manifest.labels.size());
  if (vocab != cfg.head.n_classes)
    throw Error("eval: config head has " + std::to_string(cfg.head.n_classes) +
                " classes but manifest vocabulary has " + std::to_string(vocab));
  if (task == TaskKind::multiclass)
    for (const auto& rec : manifest.records)
      if (rec.labels.size() != 1)
        throw Error("eval: multiclass clip '" + rec.path + "' must have exactly one label, got " +
                    std::to_string(rec.labels.size()));
}

}  // namespace detail

/// Clip-level metrics over one split: mean per-segment loss, then AUCs (and
/// optional instance F1) for multilabel or accuracy for multiclass.
template <class T>
EvalResult evaluate_split(Model<T>& model, const Manifest& manifest, ClipStore& store, Split split,
                          TaskKind task, std::int64_t n_segments = 0,
                          std::optional<double> threshold = std::nullopt) {
  detail::check_task<T>(manifest, model.config, task);
  auto indices = manifest.split_indices(split);
  if (indices.empty())
    throw Error(std::string("eval: no clips in split '") + split_name(split) + "'");

  NoGradGuard ng;
  std::int64_t classes = model.config.head.n_classes;
  std::int64_t seg_len = model.config.input_len;
  auto n = static_cast<std::int64_t>(indices.size());

  std::vector<double> clip_scores(static_cast<std::size_t>(n * classes), 0.0);
  std::vector<int> multihot(static_cast<std::size_t>(n * classes), 0);
  std::vector<std::int64_t> class_ids(static_cast<std::size_t>(n), 0);
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;

  for (std::int64_t r = 0; r < n; ++r) {
    const ClipRecord& rec = manifest.records[indices[static_cast<std::size_t>(r)]];
    const auto& samples = store.waveform(indices[static_cast<std::size_t>(r)]);
    if (samples.empty()) throw Error("eval: empty waveform '" + rec.path + "'");
    auto clip_len = static_cast<std::int64_t>(samples.size());
    std::int64_t want = n_segments > 0 ? n_segments : default_segment_count(clip_len, seg_len);
    SegmentPlan plan = plan_segments(clip_len, seg_len, want);

    for (auto l : rec.labels) multihot[r * classes + l] = 1;
    if (task == TaskKind::multiclass) class_ids[static_cast<std::size_t>(r)] = rec.labels[0];

    for (std::size_t s = 0; s < plan.offsets.size(); ++s) {
      Tensor<T> x = detail::segment_to_input<T>(extract_segment(samples, plan, s));
      Tensor<T> logits = model.forward(x, Mode::infer);
      if (task == TaskKind::multilabel) {
        std::vector<T> t(static_cast<std::size_t>(classes), T(0));
        for (auto l : rec.labels) t[static_cast<std::size_t>(l)] = T(1);
        loss_sum += static_cast<double>(
            bce_with_logits(logits, Tensor<T>::from({1, classes}, std::move(t))).item());
      } else {
        loss_sum += static_cast<double>(
            cross_entropy_logits(logits, {rec.labels[0]}).item());
      }
      ++loss_count;
      Tensor<T> score = model.config.head.output == OutputKind::sigmoid_multilabel
                            ? sigmoid(logits)
                            : softmax_classes(logits);
      for (std::int64_t c = 0; c < classes; ++c)
        clip_scores[r * classes + c] += static_cast<double>(score.data()[static_cast<std::size_t>(c)]);
    }
    for (std::int64_t c = 0; c < classes; ++c)
      clip_scores[r * classes + c] /= static_cast<double>(plan.offsets.size());
  }

  EvalResult result;
  result.metrics.emplace_back("loss", loss_sum / static_cast<double>(loss_count));
  if (task == TaskKind::multilabel) {
    MacroAuc macro = macro_auc(clip_scores, multihot, n, classes);
    result.metrics.emplace_back("auc_macro", macro.value);
    result.metrics.emplace_back("auc_micro", micro_auc(clip_scores, multihot, n, classes));
    result.auc_excluded = macro.excluded;
    if (threshold)
      result.metrics.emplace_back("f1", instance_f1(clip_scores, multihot, n, classes, *threshold));
  } else {
    result.metrics.emplace_back("accuracy", accuracy(clip_scores, class_ids, n, classes));
  }
  return result;
}

struct TrainResult {
  Checkpoint best;
  std::vector<LogRow> log;
  double best_metric = 0.0;
  std::int64_t best_epoch = 0;
  std::string metric_name;
};

/// Trains a fresh model on the manifest's train split, evaluating on valid
/// after every epoch; the checkpoint with the best validation metric wins.
template <class T>
TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                        const Manifest& manifest, TaskKind task,
                        std::ostream* progress = nullptr) {
  if (train_cfg.batch_size < 1) throw Error("train: batch_size must be >= 1");
  if (train_cfg.epochs < 1) throw Error("train: epochs must be >= 1");
  detail::check_task<T>(manifest, model_cfg, task);
  auto train_idx = manifest.split_indices(Split::train);
  if (train_idx.empty()) throw Error("train: no clips in split 'train'");
  if (manifest.split_indices(Split::valid).empty())
    throw Error("train: no clips in split 'valid'");

  Model<T> model = build_model<T>(model_cfg, train_cfg.seed);
  Optimizer<T> opt(model.trainable(), train_cfg.optim);
  ClipStore store(manifest, static_cast<int>(model_cfg.sample_rate));
  std::mt19937 rng(static_cast<std::mt19937::result_type>(train_cfg.seed));

  const std::int64_t classes = model_cfg.head.n_classes;
  const std::int64_t seg_len = model_cfg.input_len;
  const std::string metric_name = task == TaskKind::multilabel ? "auc_macro" : "accuracy";

  TrainResult result;
  result.metric_name = metric_name;
  bool have_best = false;
  std::int64_t stale = 0;

  for (std::int64_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);

    double loss_sum = 0.0;
    std::int64_t seen = 0, batch_no = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += static_cast<std::size_t>(train_cfg.batch_size)) {
      std::size_t stop = std::min(train_idx.size(),
                                  start + static_cast<std::size_t>(train_cfg.batch_size));
      auto bsz = static_cast<std::int64_t>(stop - start);
      ++batch_no;

      std::vector<T> xdata(static_cast<std::size_t>(bsz * seg_len), T(0));
      std::vector<T> targets(static_cast<std::size_t>(bsz * classes), T(0));
      std::vector<std::int64_t> ids(static_cast<std::size_t>(bsz), 0);
      for (std::size_t b = start; b < stop; ++b) {
        const auto rec_index = train_idx[b];
        const ClipRecord& rec = manifest.records[rec_index];
        const auto& samples = store.waveform(rec_index);
        if (samples.empty()) throw Error("train: empty waveform '" + rec.path + "'");
        auto clip_len = static_cast<std::int64_t>(samples.size());
        std::int64_t offset = 0;
        if (clip_len > seg_len) {
          std::uniform_int_distribution<std::int64_t> dist(0, clip_len - seg_len);
          offset = dist(rng);
        }
        auto row = static_cast<std::int64_t>(b - start);
        for (std::int64_t t = 0; t < seg_len; ++t)
          if (offset + t < clip_len)
            xdata[static_cast<std::size_t>(row * seg_len + t)] =
                static_cast<T>(samples[static_cast<std::size_t>(offset + t)]);
        for (auto l : rec.labels) targets[static_cast<std::size_t>(row * classes + l)] = T(1);
        if (task == TaskKind::multiclass) ids[static_cast<std::size_t>(row)] = rec.labels[0];
      }

      Tensor<T> x = Tensor<T>::from({bsz, 1, seg_len}, std::move(xdata));
      Tensor<T> logits = model.forward(x, Mode::train);
      Tensor<T> loss =
          task == TaskKind::multilabel
              ? bce_with_logits(logits, Tensor<T>::from({bsz, classes}, std::move(targets)))
              : cross_entropy_logits(logits, ids);
      double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(batch_no) + " (lr=" + format_value(opt.lr()) + ")");
      loss.backward();
      opt.step();
      model.zero_grad();
      loss_sum += loss_value * static_cast<double>(bsz);
      seen += bsz;
    }
    double train_loss = loss_sum / static_cast<double>(seen);

    EvalResult valid = evaluate_split(model, manifest, store, Split::valid, task,
                                      train_cfg.eval_segments);
    result.log.push_back({epoch, "train", "loss", train_loss});
    result.log.push_back({epoch, "train", "lr", opt.lr()});
    for (const auto& [name, value] : valid.metrics)
      result.log.push_back({epoch, "valid", name, value});

    double metric = valid.get(metric_name);
    if (!have_best || metric > result.best_metric) {
      have_best = true;
      result.best_metric = metric;
      result.best_epoch = epoch;
      CheckpointMeta meta;
      meta.epoch = epoch;
      meta.best_metric = metric;
      meta.metric_name = metric_name;
      meta.labels = manifest.labels;
      result.best = checkpoint_from_model(model, std::move(meta));
      stale = 0;
    } else if (train_cfg.schedule.kind == ScheduleConfig::Kind::step_decay) {
      if (++stale >= train_cfg.schedule.patience) {
        opt.set_lr(opt.lr() * train_cfg.schedule.factor);
        stale = 0;
      }
    }

    if (progress)
      (*progress) << "epoch " << epoch << " train_loss=" << format_value(train_loss)
                  << " valid_loss=" << format_value(valid.get("loss")) << " valid_" << metric_name
                  << "=" << format_value(metric) << "\n";
  }
  return result;
}

}  // namespace slcn
