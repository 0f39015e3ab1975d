#pragma once

// Two-stage training: cue classification, then end-to-end segmentation of
// the missing-sign region from a classifier-initialized encoder.

#include <cstdint>
#include <functional>
#include <limits>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/autodiff.hpp"
#include "cuecan/error.hpp"
#include "cuecan/losses.hpp"
#include "cuecan/metrics.hpp"
#include "cuecan/nets.hpp"
#include "cuecan/optim.hpp"
#include "cuecan/rng.hpp"
#include "cuecan/synthcue.hpp"

namespace cuecan {

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_classifier = 1e-4;
  double lr_segmenter = 1e-3;
  std::size_t epochs = 50;
  std::size_t patience = 10;  // epochs without validation improvement
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  FocalParams focal;
  std::uint64_t seed = 0;
  double tau = 0.5;
  double iou_min = 0.25;

  void validate() const {
    if (batch_size == 0) throw UsageError("train config: batch size must be at least 1");
    if (!(lr_classifier > 0.0) || !(lr_segmenter > 0.0)) throw UsageError("train config: learning rates must be positive");
    if (epochs == 0) throw UsageError("train config: epochs must be at least 1");
    if (patience == 0) throw UsageError("train config: patience must be at least 1");
    if (!(focal.alpha > 0.0 && focal.alpha < 1.0)) throw UsageError("train config: focal alpha must lie in (0, 1)");
    if (!(focal.gamma >= 0.0)) throw UsageError("train config: focal gamma must be non-negative");
    if (!(tau > 0.0 && tau < 1.0)) throw UsageError("train config: tau must lie in (0, 1)");
    if (!(iou_min > 0.0 && iou_min <= 1.0)) throw UsageError("train config: iou_min must lie in (0, 1]");
  }
};

// Receives one JSON object per epoch and split.
using MetricsSink = std::function<void(const nlohmann::json&)>;

namespace detail {

inline std::vector<Tensor4> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor4> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

inline void restore(const std::vector<Parameter*>& params, const std::vector<Tensor4>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

inline std::vector<const SyntheticScene*> batch_of(const std::vector<SyntheticScene>& scenes,
                                                   const std::vector<std::size_t>& order, std::size_t lo,
                                                   std::size_t hi) {
  std::vector<const SyntheticScene*> out;
  for (std::size_t k = lo; k < hi; ++k) out.push_back(&scenes[order[k]]);
  return out;
}

inline void emit(const MetricsSink& sink, nlohmann::json j) {
  if (sink) sink(j);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct ClassifierEval {
  MetricsReport report;
  double loss = 0.0;
};

// Threshold 0 on the logit (probability 0.5). Breakdown by cue type.
inline ClassifierEval evaluate_classifier(Model& model, const std::vector<SyntheticScene>& scenes,
                                          const std::string& split, std::size_t batch = 32) {
  if (scenes.empty()) throw DataError("evaluate_classifier: empty " + split + " split");
  ClassifierEval ev;
  ev.report.split = split;
  double loss = 0.0;
  for (std::size_t lo = 0; lo < scenes.size(); lo += batch) {
    const std::size_t hi = std::min(scenes.size(), lo + batch);
    std::vector<const SyntheticScene*> b;
    for (std::size_t i = lo; i < hi; ++i) b.push_back(&scenes[i]);
    const std::vector<double> z = forward_classify(model, stack_images(b));
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double y = b[i]->label();
      loss += std::max(z[i], 0.0) - z[i] * y + std::log1p(std::exp(-std::abs(z[i])));
      ev.report.add(z[i] > 0.0, y > 0.5, cue_type_name(b[i]->cue_type));
    }
  }
  ev.loss = loss / static_cast<double>(scenes.size());
  return ev;
}

struct ClassifierResult {
  MetricsReport val;
  MetricsReport test;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::uint64_t steps = 0;
  std::vector<double> train_losses;  // mean per epoch
};

// Shuffled mini-batches, Adam on encoder + head, BCE. The parameters with
// the best validation F (first occurrence) are restored before the test
// evaluation. Stops after `patience` epochs without improvement.
inline ClassifierResult train_classifier(Model& model, const SceneSplits& data, const TrainConfig& cfg,
                                         const MetricsSink& sink = {}) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train_classifier: empty train split");
  if (data.val.empty()) throw DataError("train_classifier: empty validation split");
  if (data.test.empty()) throw DataError("train_classifier: empty test split");
  std::vector<Parameter*> params = model.classifier_parameters();
  Adam opt(params, {cfg.lr_classifier, cfg.beta1, cfg.beta2, cfg.eps});
  ClassifierResult res;
  double best_f = -1.0;
  std::vector<Tensor4> best = detail::snapshot(params);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(cfg.seed, 500 + epoch);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const auto b = detail::batch_of(data.train, order, lo, std::min(order.size(), lo + cfg.batch_size));
      std::vector<double> labels;
      for (const SyntheticScene* s : b) labels.push_back(s->label());
      opt.zero_grad();
      Tape tape;
      Var loss = bce_with_logits(model.classify(tape.constant(stack_images(b))), labels);
      tape.backward(loss);
      opt.step();
      loss_sum += loss.value()[0];
      ++batches;
    }
    const double train_loss = loss_sum / static_cast<double>(batches);
    res.train_losses.push_back(train_loss);
    res.epochs_run = epoch;
    detail::emit(sink, {{"epoch", epoch}, {"split", "train"}, {"loss", train_loss}});

    const ClassifierEval ev = evaluate_classifier(model, data.val, "val", cfg.batch_size);
    nlohmann::json vj = to_json(ev.report.overall);
    vj["epoch"] = epoch;
    vj["split"] = "val";
    vj["loss"] = ev.loss;
    detail::emit(sink, vj);
    if (ev.report.f() > best_f) {
      best_f = ev.report.f();
      best = detail::snapshot(params);
      res.best_epoch = epoch;
      res.val = ev.report;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  detail::restore(params, best);
  res.steps = opt.steps();
  const ClassifierEval te = evaluate_classifier(model, data.test, "test", cfg.batch_size);
  res.test = te.report;
  nlohmann::json tj = te.report.json();
  tj["epoch"] = res.best_epoch;
  tj["loss"] = te.loss;
  detail::emit(sink, tj);
  return res;
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

// Per-scene logit maps, row-major (H, W).
inline std::vector<std::vector<double>> predict_logits(Model& model, const std::vector<SyntheticScene>& scenes,
                                                       std::size_t batch = 32) {
  std::vector<std::vector<double>> out;
  for (std::size_t lo = 0; lo < scenes.size(); lo += batch) {
    const std::size_t hi = std::min(scenes.size(), lo + batch);
    std::vector<const SyntheticScene*> b;
    for (std::size_t i = lo; i < hi; ++i) b.push_back(&scenes[i]);
    const Tensor4 z = forward_segment(model, stack_images(b));
    const std::size_t hw = z.shape().h * z.shape().w;
    for (std::size_t i = 0; i < b.size(); ++i) out.emplace_back(z.ptr() + i * hw, z.ptr() + (i + 1) * hw);
  }
  return out;
}

inline std::vector<double> to_probabilities(std::vector<double> logits) {
  for (double& v : logits) v = sigmoid(v);
  return logits;
}

inline std::vector<std::vector<double>> predict_probabilities(Model& model, const std::vector<SyntheticScene>& scenes,
                                                              std::size_t batch = 32) {
  auto maps = predict_logits(model, scenes, batch);
  for (auto& m : maps) m = to_probabilities(std::move(m));
  return maps;
}

struct LocalizationEval {
  LocalizationTally raw;    // connected components of the thresholded map
  LocalizationTally boxes;  // tight rectangles around the blobs
  double loss = 0.0;
};

inline LocalizationEval evaluate_localization(Model& model, const std::vector<SyntheticScene>& scenes,
                                              const TrainConfig& cfg) {
  LocalizationEval ev;
  if (scenes.empty()) return ev;
  const auto logits = predict_logits(model, scenes, cfg.batch_size);
  double loss = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SyntheticScene& s = scenes[i];
    const std::vector<double> prob = to_probabilities(logits[i]);
    LocalizationParams lp{cfg.tau, cfg.iou_min, RegionMode::Raw, 4};
    ev.raw += eval_localization(prob, s.missing_mask, s.height, s.width, lp);
    lp.mode = RegionMode::Boxes;
    ev.boxes += eval_localization(prob, s.missing_mask, s.height, s.width, lp);
    double l = 0.0;
    for (std::size_t k = 0; k < prob.size(); ++k) l += focal_term(logits[i][k], s.missing_mask[k], cfg.focal);
    loss += l / static_cast<double>(prob.size());
  }
  ev.loss = loss / static_cast<double>(scenes.size());
  return ev;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

struct SegmenterResult {
  LocalizationEval val;
  LocalizationEval test;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<double> train_losses;
};

// Scenes the segmenter learns from: S2 (target = removed sign box) plus S1
// (cue with its sign present, target empty).
inline std::vector<SyntheticScene> segmentation_subset(const std::vector<SyntheticScene>& scenes) {
  std::vector<SyntheticScene> out;
  for (const SyntheticScene& s : scenes) {
    if (s.subset == Subset::S1 || s.subset == Subset::S2) out.push_back(s);
  }
  return out;
}

inline std::vector<SyntheticScene> missing_only(const std::vector<SyntheticScene>& scenes) {
  std::vector<SyntheticScene> out;
  for (const SyntheticScene& s : scenes) {
    if (s.missing_area() > 0) out.push_back(s);
  }
  return out;
}

// End-to-end focal-loss training of encoder + decoder. Model selection on
// the lowest validation focal loss; evaluation on the test scenes that
// contain a missing region.
inline SegmenterResult train_segmenter(Model& model, const SceneSplits& data, const TrainConfig& cfg,
                                       const MetricsSink& sink = {}) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train_segmenter: empty train split");
  if (data.val.empty()) throw DataError("train_segmenter: empty validation split");
  const auto test_pos = missing_only(data.test);
  if (test_pos.empty()) throw DataError("train_segmenter: test split has no missing regions");
  std::vector<Parameter*> params = model.segmenter_parameters();
  Adam opt(params, {cfg.lr_segmenter, cfg.beta1, cfg.beta2, cfg.eps});
  SegmenterResult res;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor4> best = detail::snapshot(params);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(cfg.seed, 700 + epoch);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const auto b = detail::batch_of(data.train, order, lo, std::min(order.size(), lo + cfg.batch_size));
      std::vector<double> target;
      for (const SyntheticScene* s : b) target.insert(target.end(), s->missing_mask.begin(), s->missing_mask.end());
      opt.zero_grad();
      Tape tape;
      Var loss = focal_loss(model.segment(tape.constant(stack_images(b))).logits, target, cfg.focal);
      tape.backward(loss);
      opt.step();
      loss_sum += loss.value()[0];
      ++batches;
    }
    const double train_loss = loss_sum / static_cast<double>(batches);
    res.train_losses.push_back(train_loss);
    res.epochs_run = epoch;
    detail::emit(sink, {{"epoch", epoch}, {"split", "train"}, {"loss", train_loss}});

    const LocalizationEval ev = evaluate_localization(model, data.val, cfg);
    detail::emit(sink, {{"epoch", epoch},
                        {"split", "val"},
                        {"loss", ev.loss},
                        {"recall", optional_json(ev.raw.recall())},
                        {"recall_boxes", optional_json(ev.boxes.recall())}});
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      best = detail::snapshot(params);
      res.best_epoch = epoch;
      res.val = ev;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  detail::restore(params, best);
  res.test = evaluate_localization(model, test_pos, cfg);
  detail::emit(sink, {{"epoch", res.best_epoch},
                      {"split", "test"},
                      {"loss", res.test.loss},
                      {"recall", optional_json(res.test.raw.recall())},
                      {"recall_boxes", optional_json(res.test.boxes.recall())},
                      {"gt_regions", res.test.raw.gt_regions}});
  return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Method | Precision | Recall | F-Score, in percent.
inline std::string comparison_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream os;
  std::size_t wname = 6;
  for (const auto& [name, r] : rows) wname = std::max(wname, name.size());
  os << std::left << std::setw(static_cast<int>(wname)) << "Method" << " | Precision |  Recall  | F-Score\n";
  os << std::string(wname, '-') << "-|-----------|----------|--------\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(static_cast<int>(wname)) << name << " | " << std::right << std::setw(9)
       << 100.0 * r.precision() << " | " << std::setw(8) << 100.0 * r.recall() << " | " << std::setw(7)
       << 100.0 * r.f() << "\n";
  }
  return os.str();
}

// Method | Recall, in percent; "n/a" when there were no ground-truth regions.
inline std::string recall_table(const std::vector<std::pair<std::string, LocalizationTally>>& rows) {
  std::ostringstream os;
  std::size_t wname = 6;
  for (const auto& [name, t] : rows) wname = std::max(wname, name.size());
  os << std::left << std::setw(static_cast<int>(wname)) << "Method" << " | Recall\n";
  os << std::string(wname, '-') << "-|-------\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& [name, t] : rows) {
    os << std::left << std::setw(static_cast<int>(wname)) << name << " | ";
    if (const auto r = t.recall()) {
      os << 100.0 * *r;
    } else {
      os << "n/a";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace cuecan
