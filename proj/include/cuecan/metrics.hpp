#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/blobs.hpp"
#include "cuecan/error.hpp"

namespace cuecan {

// Harmonic mean; 0 when p + r == 0. Scale-agnostic (fractions or percent).
inline double f_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

struct Counts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  void add(bool predicted, bool actual) {
    if (predicted && actual) ++tp;
    if (predicted && !actual) ++fp;
    if (!predicted && !actual) ++tn;
    if (!predicted && actual) ++fn;
  }
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }

  std::uint64_t total() const { return tp + fp + tn + fn; }
  double precision() const { return tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f() const { return f_score(precision(), recall()); }
  double accuracy() const { return total() > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0; }
  bool operator==(const Counts&) const = default;
};

inline nlohmann::json to_json(const Counts& c) {
  return {{"TP", c.tp}, {"FP", c.fp},        {"TN", c.tn},       {"FN", c.fn},
          {"P", c.precision()}, {"R", c.recall()}, {"F", c.f()}};
}

// Confusion counts overall and per group (cue type, for instance).
struct MetricsReport {
  std::string split;
  Counts overall;
  std::map<std::string, Counts> by_group;

  void add(bool predicted, bool actual, const std::string& group = {}) {
    overall.add(predicted, actual);
    if (!group.empty()) by_group[group].add(predicted, actual);
  }
  double precision() const { return overall.precision(); }
  double recall() const { return overall.recall(); }
  double f() const { return overall.f(); }

  nlohmann::json json() const {
    nlohmann::json j = to_json(overall);
    j["split"] = split;
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [k, c] : by_group) groups[k] = to_json(c);
    j["by_group"] = groups;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Localization recall
// ---------------------------------------------------------------------------

// Raw: predicted regions are the 4-connected components of {sigmoid > tau}.
// Boxes: each component (of at least min_area pixels) is replaced by its
// filled tight bounding rectangle.
enum class RegionMode { Raw, Boxes };

struct LocalizationTally {
  std::size_t gt_regions = 0;
  std::size_t recalled = 0;

  // Absent when there were no ground-truth regions at all.
  std::optional<double> recall() const {
    if (gt_regions == 0) return std::nullopt;
    return static_cast<double>(recalled) / static_cast<double>(gt_regions);
  }
  LocalizationTally& operator+=(const LocalizationTally& o) {
    gt_regions += o.gt_regions;
    recalled += o.recalled;
    return *this;
  }
};

struct LocalizationParams {
  double tau = 0.5;
  double iou_min = 0.25;
  RegionMode mode = RegionMode::Raw;
  std::size_t min_area = 4;  // Boxes mode only
};

inline double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Predicted region rasters for one probability map.
inline std::vector<std::vector<std::uint8_t>> predicted_regions(std::span<const double> prob, std::size_t h,
                                                                std::size_t w, const LocalizationParams& lp) {
  std::vector<std::vector<std::uint8_t>> regions;
  if (lp.mode == RegionMode::Raw) {
    const auto on = threshold(prob, lp.tau);
    for (const auto& comp : connected_components(on, h, w)) {
      std::vector<std::uint8_t> r(h * w, 0);
      for (std::size_t p : comp) r[p] = 1;
      regions.push_back(std::move(r));
    }
  } else {
    for (const Blob& b : extract_blobs(prob, h, w, lp.tau, lp.min_area)) {
      std::vector<std::uint8_t> r(h * w, 0);
      for (std::size_t y = b.box.y; y < b.box.y + b.box.h; ++y) {
        for (std::size_t x = b.box.x; x < b.box.x + b.box.w; ++x) r[y * w + x] = 1;
      }
      regions.push_back(std::move(r));
    }
  }
  return regions;
}

// A ground-truth region (4-connected component of `gt`) is recalled iff some
// predicted region overlaps it with IoU >= iou_min.
inline LocalizationTally eval_localization(std::span<const double> prob, std::span<const std::uint8_t> gt,
                                           std::size_t h, std::size_t w, const LocalizationParams& lp = {}) {
  if (!(lp.tau > 0.0 && lp.tau < 1.0)) throw UsageError("eval_localization: tau must lie in (0, 1)");
  if (prob.size() != h * w || gt.size() != h * w) throw ShapeError("eval_localization: map size mismatch");
  LocalizationTally t;
  const auto preds = predicted_regions(prob, h, w, lp);
  for (const auto& comp : connected_components(gt, h, w)) {
    std::vector<std::uint8_t> g(h * w, 0);
    for (std::size_t p : comp) g[p] = 1;
    ++t.gt_regions;
    for (const auto& r : preds) {
      if (iou(r, g) >= lp.iou_min) {
        ++t.recalled;
        break;
      }
    }
  }
  return t;
}

}  // namespace cuecan
