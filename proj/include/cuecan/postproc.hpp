#pragma once

// Region post-processing, forest filtering and interval-level voting.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/blobs.hpp"
#include "cuecan/error.hpp"
#include "cuecan/forest.hpp"
#include "cuecan/metrics.hpp"

namespace cuecan {

inline constexpr int kNotMissing = 0;
inline constexpr int kMissing = 1;

inline std::vector<double> feature_row(const Box& b, std::size_t w, std::size_t h) {
  const auto v = region_features(b, w, h).values();
  return {v.begin(), v.end()};
}

struct FrameVerdict {
  std::size_t frame = 0;
  std::vector<Box> boxes;
  std::vector<int> verdicts;  // one per box
  std::vector<double> votes;  // forest vote fraction per box; 1 without a forest

  bool any_missing() const {
    for (int v : verdicts) {
      if (v == kMissing) return true;
    }
    return false;
  }
};

// Boxes of the predicted blobs of one probability map, each classified by
// the forest. Without a forest every region counts as missing.
inline FrameVerdict classify_regions(std::span<const double> prob, std::size_t h, std::size_t w, double tau,
                                     std::size_t min_area, const RandomForest* forest, std::size_t frame = 0) {
  FrameVerdict fv;
  fv.frame = frame;
  for (const Blob& b : extract_blobs(prob, h, w, tau, min_area)) {
    fv.boxes.push_back(b.box);
    if (forest != nullptr) {
      const ForestVote vote = forest_predict(*forest, feature_row(b.box, w, h));
      fv.verdicts.push_back(vote.label);
      fv.votes.push_back(vote.fraction);
    } else {
      fv.verdicts.push_back(kMissing);
      fv.votes.push_back(1.0);
    }
  }
  return fv;
}

inline double box_iou(const Box& a, const Box& b) {
  const std::size_t x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const std::size_t x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const std::size_t inter = (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0;
  const std::size_t uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Region training rows: a predicted box is positive iff it overlaps one of
// the ground-truth missing boxes with IoU >= iou_min.
struct RegionDataset {
  std::vector<std::vector<double>> X;
  std::vector<int> y;
};

inline void append_regions(RegionDataset& ds, std::span<const double> prob, std::size_t h, std::size_t w,
                           const std::vector<Box>& missing, double tau, double iou_min, std::size_t min_area = 4) {
  for (const Blob& b : extract_blobs(prob, h, w, tau, min_area)) {
    int label = kNotMissing;
    for (const Box& g : missing) {
      if (box_iou(b.box, g) >= iou_min) label = kMissing;
    }
    ds.X.push_back(feature_row(b.box, w, h));
    ds.y.push_back(label);
  }
}

// ---------------------------------------------------------------------------
// Interval voting
// ---------------------------------------------------------------------------

struct IntervalDecision {
  std::size_t interval_id = 0;
  std::vector<FrameVerdict> frames;
  std::size_t missing_frames = 0;
  bool missing = false;
};

// A frame votes "missing" when any of its regions is; the interval is missing
// iff strictly more than half of its frames vote so. Ties are not-missing.
inline IntervalDecision video_decide(std::size_t interval_id, std::vector<FrameVerdict> frames) {
  if (frames.empty()) throw DataError("video_decide: interval " + std::to_string(interval_id) + " has no frames");
  IntervalDecision d;
  d.interval_id = interval_id;
  for (const FrameVerdict& f : frames) d.missing_frames += f.any_missing() ? 1 : 0;
  d.missing = 2 * d.missing_frames > frames.size();
  d.frames = std::move(frames);
  return d;
}

inline MetricsReport eval_video(const std::vector<IntervalDecision>& decisions, const std::vector<bool>& gt_missing) {
  if (decisions.size() != gt_missing.size()) throw ShapeError("eval_video: decisions and labels differ in count");
  MetricsReport r;
  r.split = "video";
  for (std::size_t i = 0; i < decisions.size(); ++i) r.add(decisions[i].missing, gt_missing[i]);
  return r;
}

inline nlohmann::json boxes_json(const std::vector<Box>& boxes) {
  nlohmann::json j = nlohmann::json::array();
  for (const Box& b : boxes) j.push_back({b.x, b.y, b.w, b.h});
  return j;
}

// One JSON-lines record per frame of a decided interval.
inline std::vector<nlohmann::json> decision_records(const IntervalDecision& d) {
  std::vector<nlohmann::json> out;
  for (const FrameVerdict& f : d.frames) {
    nlohmann::json verdicts = nlohmann::json::array();
    for (int v : f.verdicts) verdicts.push_back(v == kMissing ? "missing" : "not-missing");
    out.push_back({{"frame", f.frame},
                   {"boxes", boxes_json(f.boxes)},
                   {"verdicts", verdicts},
                   {"interval_id", d.interval_id},
                   {"final", d.missing ? "missing" : "not-missing"}});
  }
  return out;
}

}  // namespace cuecan
