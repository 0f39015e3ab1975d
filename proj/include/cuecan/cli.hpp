#pragma once

// Command-line surface. `run` is callable in-process; the `cuecan` binary
// is a thin wrapper around it.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric (NaN/Inf), 4 invariant.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cuecan/blobs.hpp"
#include "cuecan/error.hpp"
#include "cuecan/forest.hpp"
#include "cuecan/metrics.hpp"
#include "cuecan/nets.hpp"
#include "cuecan/postproc.hpp"
#include "cuecan/synthcue.hpp"
#include "cuecan/testing/selftest.hpp"
#include "cuecan/train.hpp"

#ifndef CUECAN_VERSION
#define CUECAN_VERSION "0.1.0-unknown"
#endif

namespace cuecan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kInvariant = 4 };

inline const char* version() { return CUECAN_VERSION; }

// All flags of all subcommands; each subcommand binds the subset it uses.
struct Options {
  std::string data;
  std::string out;
  std::vector<std::string> checkpoints;
  std::string forest;
  std::string image;
  std::string compare_with;
  std::string cuecan = "333";
  std::string split = "test";
  std::string target = "cls";
  std::string pixel = "auto";
  std::uint64_t seed = 0;
  std::size_t count = 2000;
  std::size_t size = 64;
  double noise = 0.05;
  std::size_t intervals = 0;
  std::size_t frames = 8;
  std::size_t epochs = 50;
  std::size_t batch = 32;
  std::optional<double> lr;
  std::size_t patience = 10;
  double tau = 0.5;
  double iou_min = 0.25;
  double alpha = 0.25;
  double gamma = 2.0;
  std::size_t trees = 50;
  std::size_t depth = 8;
  std::size_t min_leaf = 2;
  std::size_t index = 0;
  int block = 5;
  std::size_t trials = 20;
  std::size_t instances = 100;
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError(p.string() + ": cannot open for writing");
  os << s;
  if (!os) throw DataError(p.string() + ": write failed");
}

inline json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError(p.string() + ": cannot open");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

// Line-buffered JSONL writer for metrics.
class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& p) : path_(p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    os_.open(p, std::ios::binary | std::ios::trunc);
    if (!os_) throw DataError(p.string() + ": cannot open for writing");
  }
  void write(const json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
  }
  MetricsSink sink() {
    return [this](const json& j) { write(j); };
  }

 private:
  fs::path path_;
  std::ofstream os_;
};

// Provenance: resolved config (verbatim), seed and version.
inline void write_provenance(const fs::path& out, const std::string& command, const std::string& config,
                             std::uint64_t seed) {
  fs::create_directories(out);
  write_text(out / "config.toml", config);
  json j{{"command", command}, {"seed", seed}, {"version", version()}, {"config", config}};
  write_text(out / "run.json", j.dump(2) + "\n");
}

inline std::vector<SyntheticScene> load_scenes(const std::string& dir) {
  if (dir.empty()) throw UsageError("--data is required");
  if (!fs::is_directory(dir)) throw DataError(dir + ": not a directory");
  return import_scenes(dir);
}

inline SceneSplits standard_splits(const std::vector<SyntheticScene>& scenes, std::uint64_t seed) {
  return split(scenes, {0.8, 0.1, 0.1}, seed);
}

inline const std::vector<SyntheticScene>& pick_split(const SceneSplits& s, const std::vector<SyntheticScene>& all,
                                                     const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  if (name == "all") return all;
  throw UsageError("unknown split '" + name + "' (train, val, test, all)");
}

// Accepts a checkpoint directory or a run directory holding `checkpoint/`.
inline fs::path resolve_checkpoint(const std::string& p) {
  if (p.empty()) throw UsageError("--checkpoint is required");
  const fs::path base(p);
  if (fs::exists(base / "manifest.json")) return base;
  if (fs::exists(base / "checkpoint" / "manifest.json")) return base / "checkpoint";
  throw DataError(p + ": no checkpoint manifest found");
}

inline Model load_model(const std::string& p, LoadScope scope = LoadScope::All) {
  const fs::path dir = resolve_checkpoint(p);
  Model m(config_from_manifest(read_manifest(dir)));
  load_checkpoint(m, dir, scope);
  return m;
}

inline std::string method_name(const CueCanConfig& c) {
  return c.empty() ? std::string("vanilla") : "CueCAn_" + render_cuecan_config(c);
}

inline Counts counts_from_json(const json& j) {
  Counts c;
  c.tp = j.at("TP").get<std::uint64_t>();
  c.fp = j.at("FP").get<std::uint64_t>();
  c.tn = j.at("TN").get<std::uint64_t>();
  c.fn = j.at("FN").get<std::uint64_t>();
  return c;
}

inline TrainConfig train_config(const Options& o, double lr_cls, double lr_seg) {
  TrainConfig tc;
  tc.batch_size = o.batch;
  tc.lr_classifier = lr_cls;
  tc.lr_segmenter = lr_seg;
  tc.epochs = o.epochs;
  tc.patience = o.patience;
  tc.focal = {o.alpha, o.gamma};
  tc.seed = o.seed;
  tc.tau = o.tau;
  tc.iou_min = o.iou_min;
  tc.validate();
  return tc;
}

inline void require_out(const Options& o) {
  if (o.out.empty()) throw UsageError("--out is required");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  GeneratorParams gp;
  gp.height = gp.width = o.size;
  gp.noise_sigma = o.noise;
  const std::vector<SyntheticScene> scenes =
      o.intervals > 0 ? generate_intervals(gp, o.intervals, o.frames, o.seed) : generate(gp, o.count, o.seed);
  export_scenes(scenes, o.out);
  write_provenance(o.out, "gen", config, o.seed);
  std::array<std::size_t, 4> per{};
  for (const SyntheticScene& s : scenes) ++per[static_cast<std::size_t>(s.subset)];
  out << "wrote " << scenes.size() << " scenes to " << o.out << " (S1 " << per[0] << ", S2 " << per[1] << ", S3 "
      << per[2] << ", S4 " << per[3] << ")\n";
  return kOk;
}

inline int cmd_train_cls(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  const TrainConfig tc = train_config(o, o.lr.value_or(1e-4), 1e-3);
  const auto scenes = load_scenes(o.data);
  const SceneSplits sp = standard_splits(scenes, o.seed);
  ModelConfig mc;
  mc.cuecan = parse_cuecan_config(o.cuecan);
  mc.seed = o.seed;
  Model model(mc);
  write_provenance(o.out, "train-cls", config, o.seed);
  JsonlWriter metrics(fs::path(o.out) / "metrics.jsonl");
  const ClassifierResult res = train_classifier(model, sp, tc, metrics.sink());
  save_checkpoint(model, fs::path(o.out) / "checkpoint", Dtype::F64, json{{"stage", "classifier"}, {"seed", o.seed}});

  const std::string name = method_name(mc.cuecan);
  json result{{"method", name},
              {"cuecan", render_cuecan_config(mc.cuecan)},
              {"parameters", parameter_count(model.classifier_parameters())},
              {"best_epoch", res.best_epoch},
              {"epochs_run", res.epochs_run},
              {"test", res.test.json()}};
  write_text(fs::path(o.out) / "result.json", result.dump(2) + "\n");

  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::string note;
  if (!o.compare_with.empty()) {
    const json other = read_json_file(fs::path(o.compare_with) / "result.json");
    MetricsReport r;
    r.overall = counts_from_json(other.at("test"));
    rows.emplace_back(other.at("method").get<std::string>(), r);
    const bool other_is_base = other.at("cuecan").get<std::string>().empty();
    const bool this_is_base = mc.cuecan.empty();
    if (other_is_base != this_is_base) {
      const double f_cue = this_is_base ? r.f() : res.test.f();
      const double f_base = this_is_base ? res.test.f() : r.f();
      note = f_cue >= f_base ? "direction: CueCAn F >= baseline F\n"
                             : "INVERSION: CueCAn F < baseline F on this run\n";
    }
  }
  rows.emplace_back(name, res.test);
  const std::string table = comparison_table(rows) + note;
  write_text(fs::path(o.out) / "report.txt", table);
  out << table;
  return kOk;
}

inline int cmd_train_seg(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  if (o.checkpoints.size() != 1) throw UsageError("train-seg needs exactly one --checkpoint (the classifier)");
  const TrainConfig tc = train_config(o, 1e-4, o.lr.value_or(1e-3));
  const auto scenes = load_scenes(o.data);
  const SceneSplits sp = standard_splits(scenes, o.seed);
  const SceneSplits seg{segmentation_subset(sp.train), segmentation_subset(sp.val), segmentation_subset(sp.test)};
  Model model = load_model(o.checkpoints.front(), LoadScope::EncoderOnly);
  write_provenance(o.out, "train-seg", config, o.seed);
  JsonlWriter metrics(fs::path(o.out) / "metrics.jsonl");
  const SegmenterResult res = train_segmenter(model, seg, tc, metrics.sink());
  save_checkpoint(model, fs::path(o.out) / "checkpoint", Dtype::F64, json{{"stage", "segmenter"}, {"seed", o.seed}});
  const std::string name = method_name(model.config().cuecan);
  json result{{"method", name},
              {"best_epoch", res.best_epoch},
              {"epochs_run", res.epochs_run},
              {"gt_regions", res.test.raw.gt_regions},
              {"recall", optional_json(res.test.raw.recall())},
              {"recall_boxes", optional_json(res.test.boxes.recall())}};
  write_text(fs::path(o.out) / "result.json", result.dump(2) + "\n");
  const std::string table = recall_table({{name, res.test.raw}, {name + "-P", res.test.boxes}});
  write_text(fs::path(o.out) / "report.txt", table);
  out << table;
  return kOk;
}

inline int cmd_eval_cls(const Options& o, std::ostream& out) {
  if (o.checkpoints.empty()) throw UsageError("eval-cls needs at least one --checkpoint");
  const auto scenes = load_scenes(o.data);
  const SceneSplits sp = standard_splits(scenes, o.seed);
  const auto& subset = pick_split(sp, scenes, o.split);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::optional<JsonlWriter> metrics;
  if (!o.out.empty()) metrics.emplace(fs::path(o.out) / "metrics.jsonl");
  for (const std::string& ck : o.checkpoints) {
    Model m = load_model(ck);
    ClassifierEval ev = evaluate_classifier(m, subset, o.split, o.batch);
    json j = ev.report.json();
    j["checkpoint"] = ck;
    j["method"] = method_name(m.config().cuecan);
    if (metrics) metrics->write(j);
    rows.emplace_back(method_name(m.config().cuecan), ev.report);
  }
  const std::string table = comparison_table(rows);
  if (!o.out.empty()) write_text(fs::path(o.out) / "report.txt", table);
  out << table;
  return kOk;
}

inline int cmd_eval_seg(const Options& o, std::ostream& out) {
  if (o.checkpoints.size() != 1) throw UsageError("eval-seg needs exactly one --checkpoint");
  TrainConfig tc = train_config(o, 1e-4, 1e-3);
  const auto scenes = load_scenes(o.data);
  const SceneSplits sp = standard_splits(scenes, o.seed);
  const auto pos = missing_only(pick_split(sp, scenes, o.split));
  if (pos.empty()) throw DataError("eval-seg: no scenes with a missing region in split '" + o.split + "'");
  Model m = load_model(o.checkpoints.front());
  const LocalizationEval ev = evaluate_localization(m, pos, tc);
  const std::string name = method_name(m.config().cuecan);
  const std::string table = recall_table({{name, ev.raw}, {name + "-P", ev.boxes}});
  if (!o.out.empty()) {
    JsonlWriter w(fs::path(o.out) / "metrics.jsonl");
    w.write({{"split", o.split},
              {"gt_regions", ev.raw.gt_regions},
              {"recall", optional_json(ev.raw.recall())},
              {"recall_boxes", optional_json(ev.boxes.recall())}});
    write_text(fs::path(o.out) / "report.txt", table);
  }
  out << table;
  return kOk;
}

inline std::optional<RandomForest> maybe_forest(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return forest_from_json(read_json_file(path));
}

inline int cmd_postprocess(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  if (o.checkpoints.size() != 1) throw UsageError("postprocess needs exactly one --checkpoint");
  if (!(o.tau > 0.0 && o.tau < 1.0)) throw UsageError("--tau must lie in (0, 1)");
  const auto scenes = load_scenes(o.data);
  Model m = load_model(o.checkpoints.front());
  const auto forest = maybe_forest(o.forest);
  const auto probs = predict_probabilities(m, scenes, o.batch);
  write_provenance(o.out, "postprocess", config, o.seed);
  JsonlWriter w(fs::path(o.out) / "regions.jsonl");
  std::size_t regions = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const FrameVerdict fv =
        classify_regions(probs[i], scenes[i].height, scenes[i].width, o.tau, 4, forest ? &*forest : nullptr, scenes[i].index);
    json verdicts = json::array();
    for (int v : fv.verdicts) verdicts.push_back(v == kMissing ? "missing" : "not-missing");
    w.write({{"frame", fv.frame}, {"boxes", boxes_json(fv.boxes)}, {"verdicts", verdicts}, {"votes", fv.votes}});
    regions += fv.boxes.size();
  }
  out << "wrote " << regions << " regions for " << scenes.size() << " scenes to "
      << (fs::path(o.out) / "regions.jsonl").string() << "\n";
  return kOk;
}

inline int cmd_train_rf(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  if (o.checkpoints.size() != 1) throw UsageError("train-rf needs exactly one --checkpoint (the segmenter)");
  if (!(o.tau > 0.0 && o.tau < 1.0)) throw UsageError("--tau must lie in (0, 1)");
  const auto scenes = load_scenes(o.data);
  Model m = load_model(o.checkpoints.front());
  const auto probs = predict_probabilities(m, scenes, o.batch);
  RegionDataset ds;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SyntheticScene& s = scenes[i];
    const std::vector<Box> missing = s.missing_area() > 0 ? s.sign_boxes : std::vector<Box>{};
    append_regions(ds, probs[i], s.height, s.width, missing, o.tau, o.iou_min);
  }
  if (ds.X.empty()) throw DataError("train-rf: the segmenter predicted no regions at tau " + std::to_string(o.tau));

  // 80:10:10 over region rows.
  std::vector<std::size_t> order(ds.X.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(o.seed, 0xF0);
  rng.shuffle(order.begin(), order.end());
  const std::size_t n_train = std::max<std::size_t>(1, order.size() * 8 / 10);
  const std::size_t n_val = (order.size() - n_train) / 2;
  RegionDataset train, test;
  for (std::size_t k = 0; k < order.size(); ++k) {
    RegionDataset& dst = k < n_train ? train : test;
    if (k >= n_train && k < n_train + n_val) continue;  // validation rows are held out
    dst.X.push_back(ds.X[order[k]]);
    dst.y.push_back(ds.y[order[k]]);
  }
  ForestParams fp;
  fp.trees = o.trees;
  fp.max_depth = o.depth;
  fp.min_leaf = o.min_leaf;
  const RandomForest forest = forest_train(train.X, train.y, fp, o.seed);
  write_provenance(o.out, "train-rf", config, o.seed);
  write_text(fs::path(o.out) / "forest.json", forest_to_json(forest).dump() + "\n");
  MetricsReport rep;
  rep.split = "test";
  for (std::size_t i = 0; i < test.X.size(); ++i) rep.add(forest_predict(forest, test.X[i]).label == kMissing, test.y[i] == kMissing);
  json j = rep.json();
  j["regions"] = ds.X.size();
  j["positives"] = std::count(ds.y.begin(), ds.y.end(), kMissing);
  j["degenerate"] = forest.degenerate.has_value();
  j["oob_error"] = optional_json(oob_error(forest, train.X, train.y));
  JsonlWriter w(fs::path(o.out) / "metrics.jsonl");
  w.write(j);
  const std::string table = comparison_table({{"Region forest", rep}});
  write_text(fs::path(o.out) / "report.txt", table);
  out << table;
  return kOk;
}

inline int cmd_eval_video(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  if (o.checkpoints.size() != 1) throw UsageError("eval-video needs exactly one --checkpoint (the segmenter)");
  if (!(o.tau > 0.0 && o.tau < 1.0)) throw UsageError("--tau must lie in (0, 1)");
  const auto scenes = load_scenes(o.data);
  std::map<std::size_t, std::vector<std::size_t>> by_interval;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (!scenes[i].interval) throw DataError("eval-video: scene " + std::to_string(scenes[i].index) + " has no interval id");
    by_interval[*scenes[i].interval].push_back(i);
  }
  Model m = load_model(o.checkpoints.front());
  const auto forest = maybe_forest(o.forest);
  const auto probs = predict_probabilities(m, scenes, o.batch);
  write_provenance(o.out, "eval-video", config, o.seed);
  JsonlWriter w(fs::path(o.out) / "decisions.jsonl");
  std::vector<IntervalDecision> decisions;
  std::vector<bool> gt;
  for (const auto& [iv, members] : by_interval) {
    std::vector<FrameVerdict> frames;
    bool missing = false;
    for (std::size_t i : members) {
      frames.push_back(classify_regions(probs[i], scenes[i].height, scenes[i].width, o.tau, 4,
                                        forest ? &*forest : nullptr, scenes[i].index));
      missing = missing || scenes[i].subset == Subset::S2;
    }
    decisions.push_back(video_decide(iv, std::move(frames)));
    gt.push_back(missing);
    for (const json& rec : decision_records(decisions.back())) w.write(rec);
  }
  const MetricsReport rep = eval_video(decisions, gt);
  JsonlWriter mw(fs::path(o.out) / "metrics.jsonl");
  mw.write(rep.json());
  const std::string table = comparison_table({{"Video recognition", rep}});
  write_text(fs::path(o.out) / "report.txt", table);
  out << table;
  return kOk;
}

inline void write_pgm_heat(const fs::path& p, const std::vector<double>& v, std::size_t w, std::size_t h) {
  std::vector<std::uint8_t> bytes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) bytes[i] = quantize(v[i]);
  write_pnm(p, '5', w, h, bytes);
}

inline int cmd_gradcam(const Options& o, const std::string& config, std::ostream& out) {
  require_out(o);
  if (o.checkpoints.size() != 1) throw UsageError("gradcam needs exactly one --checkpoint");
  Tensor4 image;
  if (!o.image.empty()) {
    const PnmImage img = read_pnm(o.image, '6');
    image = Tensor4({1, img.height, img.width, 3});
    for (std::size_t i = 0; i < img.bytes.size(); ++i) image[i] = static_cast<double>(img.bytes[i]) / 255.0;
  } else {
    const auto scenes = load_scenes(o.data);
    const auto it = std::find_if(scenes.begin(), scenes.end(), [&](const SyntheticScene& s) { return s.index == o.index; });
    if (it == scenes.end()) throw DataError("gradcam: no scene with index " + std::to_string(o.index));
    image = stack_images({&*it});
  }
  Model m = load_model(o.checkpoints.front());
  if (o.block < 1 || static_cast<std::size_t>(o.block) > m.encoder().blocks.size()) {
    throw UsageError("--block must lie in 1.." + std::to_string(m.encoder().blocks.size()));
  }
  const std::size_t H = image.shape().h, W = image.shape().w;
  CamTarget target;
  json info{{"block", o.block}, {"target", o.target}};
  if (o.target == "seg") {
    target.kind = CamTarget::Kind::SegmentPixel;
    if (o.pixel == "auto") {
      const Tensor4 z = forward_segment(m, image);
      std::vector<double> prob(z.data().begin(), z.data().end());
      for (double& v : prob) v = sigmoid(v);
      const auto blobs = extract_blobs(prob, H, W, o.tau, 1);
      if (!blobs.empty()) {
        // Centroid of the largest blob, rounded to the nearest pixel.
        double sy = 0.0, sx = 0.0;
        for (std::size_t p : blobs.front().pixels) {
          sy += static_cast<double>(p / W);
          sx += static_cast<double>(p % W);
        }
        const double n = static_cast<double>(blobs.front().pixels.size());
        target.row = static_cast<std::size_t>(std::lround(sy / n));
        target.col = static_cast<std::size_t>(std::lround(sx / n));
        info["pixel_source"] = "largest_blob_centroid";
      } else {
        const auto k = static_cast<std::size_t>(std::max_element(prob.begin(), prob.end()) - prob.begin());
        target.row = k / W;
        target.col = k % W;
        info["pixel_source"] = "argmax_no_blob";
      }
    } else {
      const auto comma = o.pixel.find(',');
      if (comma == std::string::npos) throw UsageError("--pixel must be 'auto' or 'row,col'");
      try {
        target.row = std::stoul(o.pixel.substr(0, comma));
        target.col = std::stoul(o.pixel.substr(comma + 1));
      } catch (const std::exception&) {
        throw UsageError("--pixel must be 'auto' or 'row,col'");
      }
      info["pixel_source"] = "explicit";
    }
    info["pixel"] = {target.row, target.col};
  } else if (o.target != "cls") {
    throw UsageError("--target must be 'cls' or 'seg'");
  }
  const HeatMap hm = grad_cam(m, image, target, o.block);
  // Display at image resolution.
  Tape tape;
  const Tensor4 up = bilinear_upsample(tape.constant(Tensor4({1, hm.h, hm.w, 1}, hm.values)), H, W).value();
  std::vector<double> heat(up.data().begin(), up.data().end());
  write_provenance(o.out, "gradcam", config, o.seed);
  write_pgm_heat(fs::path(o.out) / "heat.pgm", heat, W, H);
  std::vector<std::uint8_t> overlay(H * W * 3);
  for (std::size_t p = 0; p < H * W; ++p) {
    // 0.5 blend of the image and a red-channel heat map.
    overlay[p * 3 + 0] = quantize(0.5 * image[p * 3 + 0] + 0.5 * heat[p]);
    overlay[p * 3 + 1] = quantize(0.5 * image[p * 3 + 1]);
    overlay[p * 3 + 2] = quantize(0.5 * image[p * 3 + 2]);
  }
  write_pnm(fs::path(o.out) / "overlay.ppm", '6', W, H, overlay);
  info["heat_resolution"] = {hm.h, hm.w};
  write_text(fs::path(o.out) / "cam.json", info.dump(2) + "\n");
  out << "wrote heat.pgm and overlay.ppm to " << o.out << "\n";
  return kOk;
}

inline int cmd_selftest(const Options& o, const std::string& config, std::ostream& out) {
  auto grads = selftest::run_gradient_suite(o.seed, o.trials);
  auto oracles = selftest::run_oracle_suite(o.seed, o.instances);
  std::optional<JsonlWriter> w;
  if (!o.out.empty()) {
    write_provenance(o.out, "selftest", config, o.seed);
    w.emplace(fs::path(o.out) / "metrics.jsonl");
  }
  bool ok = true;
  auto report = [&](const char* suite, const std::vector<selftest::Outcome>& v) {
    for (const auto& r : v) {
      out << (r.passed ? "PASS " : "FAIL ") << suite << " " << r.name << " worst=" << r.worst << " tol=" << r.tolerance
          << " trials=" << r.trials << (r.passed ? "" : " (" + r.detail + ")") << "\n";
      ok = ok && r.passed;
      if (w) {
        json j = r.json();
        j["suite"] = suite;
        w->write(j);
      }
    }
  };
  report("gradient", grads);
  report("oracle", oracles);
  out << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? kOk : kInvariant;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr) return kUsage;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return kNumeric;
  if (dynamic_cast<const InvariantError*>(&e) != nullptr) return kInvariant;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return kData;
  if (dynamic_cast<const ShapeError*>(&e) != nullptr) return kData;
  if (dynamic_cast<const fs::filesystem_error*>(&e) != nullptr) return kData;
  if (dynamic_cast<const json::exception*>(&e) != nullptr) return kData;
  return kInvariant;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cue-driven contextual attention: synthetic data, training, evaluation and post-processing", "cuecan"};
  app.set_version_flag("--version", std::string(version()));
  app.set_config("--config", "", "TOML/INI file with option values (command-line flags take precedence)");
  app.require_subcommand(1, 1);
  Options o;

  auto data = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--data", o.data, "Scene directory (from `gen`)");
    if (required) opt->required();
  };
  auto outdir = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--out", o.out, "Output directory");
    if (required) opt->required();
  };
  auto seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed (also fixes the data split)")->capture_default_str(); };
  auto ckpt = [&](CLI::App* c, bool many) {
    auto* opt = c->add_option("--checkpoint", o.checkpoints, many ? "Checkpoint or run directory (repeatable)"
                                                                  : "Checkpoint or run directory")
                    ->required();
    if (!many) opt->expected(1);
  };
  auto training = [&](CLI::App* c) {
    c->add_option("--epochs", o.epochs, "Maximum epochs")->capture_default_str();
    c->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str();
    c->add_option("--lr", o.lr, "Learning rate (default 1e-4 classifier, 1e-3 segmenter)");
    c->add_option("--patience", o.patience, "Early stop after this many epochs without improvement")->capture_default_str();
  };
  auto thresholds = [&](CLI::App* c) {
    c->add_option("--tau", o.tau, "Probability threshold for predicted regions")->capture_default_str();
    c->add_option("--iou-min", o.iou_min, "Minimum IoU for a recalled region")->capture_default_str();
  };
  auto batch_only = [&](CLI::App* c) { c->add_option("--batch", o.batch, "Inference batch size")->capture_default_str(); };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene directory");
  outdir(gen, true);
  seed(gen);
  gen->add_option("--count", o.count, "Number of scenes")->capture_default_str();
  gen->add_option("--size", o.size, "Image height and width")->capture_default_str();
  gen->add_option("--noise", o.noise, "Gaussian pixel noise sigma")->capture_default_str();
  gen->add_option("--intervals", o.intervals, "Generate video intervals instead of independent scenes")->capture_default_str();
  gen->add_option("--frames", o.frames, "Frames per interval")->capture_default_str();

  auto* tcls = app.add_subcommand("train-cls", "Train the cue classifier");
  data(tcls, true);
  outdir(tcls, true);
  seed(tcls);
  training(tcls);
  tcls->add_option("--cuecan", o.cuecan, "Unit config, e.g. 333 or 5e5e3; empty for the vanilla encoder")->capture_default_str();
  tcls->add_option("--compare-with", o.compare_with, "Another train-cls run directory for the comparison table");

  auto* tseg = app.add_subcommand("train-seg", "Fine-tune the segmenter from a classifier checkpoint");
  data(tseg, true);
  outdir(tseg, true);
  seed(tseg);
  ckpt(tseg, false);
  training(tseg);
  thresholds(tseg);
  tseg->add_option("--alpha", o.alpha, "Focal alpha")->capture_default_str();
  tseg->add_option("--gamma", o.gamma, "Focal gamma")->capture_default_str();

  auto* ecls = app.add_subcommand("eval-cls", "Evaluate classifier checkpoints");
  data(ecls, true);
  outdir(ecls, false);
  seed(ecls);
  ckpt(ecls, true);
  batch_only(ecls);
  ecls->add_option("--split", o.split, "train, val, test or all")->capture_default_str();

  auto* eseg = app.add_subcommand("eval-seg", "Evaluate missing-region recall of a segmenter");
  data(eseg, true);
  outdir(eseg, false);
  seed(eseg);
  ckpt(eseg, false);
  batch_only(eseg);
  thresholds(eseg);
  eseg->add_option("--split", o.split, "train, val, test or all")->capture_default_str();

  auto* post = app.add_subcommand("postprocess", "Write rectangle regions (and forest verdicts) per scene");
  data(post, true);
  outdir(post, true);
  seed(post);
  ckpt(post, false);
  batch_only(post);
  post->add_option("--tau", o.tau, "Probability threshold")->capture_default_str();
  post->add_option("--forest", o.forest, "Forest file from train-rf");

  auto* trf = app.add_subcommand("train-rf", "Train the region forest on segmenter predictions");
  data(trf, true);
  outdir(trf, true);
  seed(trf);
  ckpt(trf, false);
  batch_only(trf);
  thresholds(trf);
  trf->add_option("--trees", o.trees, "Number of trees")->capture_default_str();
  trf->add_option("--depth", o.depth, "Maximum tree depth")->capture_default_str();
  trf->add_option("--min-leaf", o.min_leaf, "Minimum samples per leaf")->capture_default_str();

  auto* evid = app.add_subcommand("eval-video", "Majority-vote recognition over frame intervals");
  data(evid, true);
  outdir(evid, true);
  seed(evid);
  ckpt(evid, false);
  batch_only(evid);
  evid->add_option("--tau", o.tau, "Probability threshold")->capture_default_str();
  evid->add_option("--forest", o.forest, "Forest file from train-rf");

  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heat map and overlay for one image");
  outdir(cam, true);
  seed(cam);
  ckpt(cam, false);
  data(cam, false);
  cam->add_option("--index", o.index, "Scene index within --data")->capture_default_str();
  cam->add_option("--image", o.image, "P6 image instead of --data/--index");
  cam->add_option("--target", o.target, "cls or seg")->capture_default_str();
  cam->add_option("--pixel", o.pixel, "auto (largest blob centroid) or row,col")->capture_default_str();
  cam->add_option("--block", o.block, "Encoder block (1-5) whose output is explained")->capture_default_str();
  cam->add_option("--tau", o.tau, "Threshold for --pixel auto")->capture_default_str();

  auto* st = app.add_subcommand("selftest", "Run the gradient-check and oracle suites");
  outdir(st, false);
  seed(st);
  st->add_option("--trials", o.trials, "Gradient-check trials per op")->capture_default_str();
  st->add_option("--instances", o.instances, "Random instances per oracle")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  const std::string config = app.config_to_str(true, false);
  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen") return cmd_gen(o, config, out);
    if (name == "train-cls") return cmd_train_cls(o, config, out);
    if (name == "train-seg") return cmd_train_seg(o, config, out);
    if (name == "eval-cls") return cmd_eval_cls(o, out);
    if (name == "eval-seg") return cmd_eval_seg(o, out);
    if (name == "postprocess") return cmd_postprocess(o, config, out);
    if (name == "train-rf") return cmd_train_rf(o, config, out);
    if (name == "eval-video") return cmd_eval_video(o, config, out);
    if (name == "gradcam") return cmd_gradcam(o, config, out);
    if (name == "selftest") return cmd_selftest(o, config, out);
    throw UsageError("unknown command " + name);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e);
  }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace cuecan::cli
