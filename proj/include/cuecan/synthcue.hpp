#pragma once

// Procedural road scenes with cue-like discontinuities and sign glyphs.
//
// Four balanced subsets:
//   S1  cue + sign
//   S2  cue, sign removed (the removed box is the segmentation target)
//   S3  sign, no cue
//   S4  neither
//
// Three cue families exercise row-wise, column-wise and composed filling:
// horizontal striped ridges (speed breakers), a vertical median band broken
// by a gap, and a curved lane band. Each family places its sign by a fixed
// rule with jitter, so missing-sign localization is learnable from the cue.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/blobs.hpp"
#include "cuecan/error.hpp"
#include "cuecan/rng.hpp"
#include "cuecan/tensor.hpp"

namespace cuecan {

enum class CueType { None, Ridge, MedianGap, Curve };
enum class Subset { S1, S2, S3, S4 };

inline const char* cue_type_name(CueType c) {
  switch (c) {
    case CueType::Ridge: return "ridge";
    case CueType::MedianGap: return "median_gap";
    case CueType::Curve: return "curve";
    default: return "none";
  }
}

inline CueType parse_cue_type(const std::string& s) {
  if (s == "none") return CueType::None;
  if (s == "ridge") return CueType::Ridge;
  if (s == "median_gap") return CueType::MedianGap;
  if (s == "curve") return CueType::Curve;
  throw DataError("unknown cue type '" + s + "'");
}

inline const char* subset_name(Subset s) {
  static constexpr std::array<const char*, 4> names{"S1", "S2", "S3", "S4"};
  return names[static_cast<std::size_t>(s)];
}

inline Subset parse_subset(const std::string& s) {
  for (int i = 0; i < 4; ++i) {
    if (s == subset_name(static_cast<Subset>(i))) return static_cast<Subset>(i);
  }
  throw DataError("unknown subset '" + s + "'");
}

inline bool subset_has_cue(Subset s) { return s == Subset::S1 || s == Subset::S2; }
inline bool subset_has_sign(Subset s) { return s != Subset::S4; }
inline bool subset_renders_sign(Subset s) { return s == Subset::S1 || s == Subset::S3; }

struct SyntheticScene {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> image;  // (height, width, 3) in [0, 1]
  CueType cue_type = CueType::None;
  std::vector<std::uint8_t> cue_mask;
  // Intended sign boxes. Rendered for S1/S3; for S2 the box was removed.
  std::vector<Box> sign_boxes;
  std::vector<std::uint8_t> missing_mask;
  Subset subset = Subset::S4;
  std::uint64_t seed = 0;
  std::size_t index = 0;
  std::optional<std::size_t> interval;  // video interval id, if any

  bool has_cue() const { return subset_has_cue(subset); }
  double label() const { return has_cue() ? 1.0 : 0.0; }
  std::size_t missing_area() const {
    std::size_t n = 0;
    for (auto m : missing_mask) n += m;
    return n;
  }
};

struct GeneratorParams {
  std::size_t height = 64;
  std::size_t width = 64;
  bool balanced = true;
  std::array<double, 4> subset_weights{0.25, 0.25, 0.25, 0.25};  // used when !balanced
  std::vector<CueType> cue_types{CueType::Ridge, CueType::MedianGap, CueType::Curve};

  std::size_t ridge_count_min = 2, ridge_count_max = 3;
  std::size_t ridge_thickness_min = 2, ridge_thickness_max = 3;
  std::size_t gap_min = 11, gap_max = 14;
  std::size_t median_width_min = 3, median_width_max = 4;
  double curve_radius_min = 14.0, curve_radius_max = 22.0;
  std::size_t curve_thickness_min = 2, curve_thickness_max = 3;
  std::size_t sign_min = 6, sign_max = 8;

  double noise_sigma = 0.05;
  double road_low = 0.25, road_high = 0.55;  // road grey level range
  double horizon_low = 0.30, horizon_high = 0.42;  // fraction of height
  std::size_t distractors_max = 2;

  void validate() const {
    auto bad = [](const std::string& what) { throw UsageError("generator params: " + what); };
    if (height < 32 || width < 32) bad("image must be at least 32x32");
    if (ridge_count_min == 0 || ridge_count_min > ridge_count_max) bad("ridge count range");
    if (ridge_thickness_min == 0 || ridge_thickness_min > ridge_thickness_max) bad("ridge thickness range");
    if (sign_min < 3 || sign_min > sign_max) bad("sign size range");
    if (gap_min > gap_max || gap_min < sign_max + 2) bad("gap range must fit a sign with margin");
    if (median_width_min == 0 || median_width_min > median_width_max) bad("median width range");
    if (!(curve_radius_min > 0.0) || curve_radius_min > curve_radius_max) bad("curve radius range");
    if (curve_thickness_min == 0 || curve_thickness_min > curve_thickness_max) bad("curve thickness range");
    if (!(noise_sigma >= 0.0)) bad("noise sigma");
    if (!(road_low >= 0.0 && road_low < road_high && road_high <= 1.0)) bad("road level range");
    if (!(horizon_low > 0.0 && horizon_low < horizon_high && horizon_high < 0.6)) bad("horizon range");
    if (cue_types.empty()) bad("no cue types");
    for (CueType c : cue_types) {
      if (c == CueType::None) bad("cue type list contains none");
    }
    double ws = 0.0;
    for (double v : subset_weights) {
      if (v < 0.0) bad("negative subset weight");
      ws += v;
    }
    if (!balanced && !(ws > 0.0)) bad("subset weights sum to zero");
  }
};

namespace detail {

using Rgb = std::array<double, 3>;

class Canvas {
 public:
  Canvas(std::size_t h, std::size_t w) : h_(h), w_(w), px_(h * w * 3, 0.0), cue_(h * w, 0) {}

  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  bool inside(long y, long x) const { return y >= 0 && x >= 0 && y < static_cast<long>(h_) && x < static_cast<long>(w_); }

  void set(long y, long x, const Rgb& c) {
    if (!inside(y, x)) return;
    double* p = &px_[(static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  void set_cue(long y, long x, const Rgb& c) {
    if (!inside(y, x)) return;
    set(y, x, c);
    cue_[static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)] = 1;
  }
  bool cue_at(std::size_t y, std::size_t x) const { return cue_[y * w_ + x] != 0; }

  std::vector<double>& pixels() { return px_; }
  std::vector<std::uint8_t>& cue() { return cue_; }

 private:
  std::size_t h_, w_;
  std::vector<double> px_;
  std::vector<std::uint8_t> cue_;
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

inline void draw_background(Canvas& cv, const GeneratorParams& p, Rng& rng, std::size_t horizon) {
  const double sky = rng.uniform(0.55, 0.8);
  const Rgb sky_tint{rng.uniform(0.75, 0.9), rng.uniform(0.85, 0.95), 1.0};
  const double road = rng.uniform(p.road_low, p.road_high);
  const double road_slope = rng.uniform(-0.12, 0.12);
  for (std::size_t y = 0; y < cv.h(); ++y) {
    for (std::size_t x = 0; x < cv.w(); ++x) {
      if (y < horizon) {
        const double lift = 0.15 * static_cast<double>(y) / static_cast<double>(horizon);
        const double v = std::min(1.0, sky + lift);
        cv.set(static_cast<long>(y), static_cast<long>(x), {v * sky_tint[0], v * sky_tint[1], v * sky_tint[2]});
      } else {
        const double t = static_cast<double>(y - horizon) / static_cast<double>(cv.h() - horizon);
        const double v = std::clamp(road + road_slope * t, 0.0, 1.0);
        cv.set(static_cast<long>(y), static_cast<long>(x), {v, v, v * 1.02});
      }
    }
  }
  // Low-contrast road patches (shadows, repairs) present in every subset.
  const std::size_t n = pick(rng, 0, p.distractors_max);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ph = pick(rng, 3, 8), pw = pick(rng, 3, 10);
    const std::size_t y0 = pick(rng, horizon, cv.h() - ph), x0 = pick(rng, 0, cv.w() - pw);
    const double d = rng.uniform(-0.12, 0.12);
    const double v = std::clamp(road + d, 0.0, 1.0);
    for (std::size_t y = y0; y < y0 + ph; ++y) {
      for (std::size_t x = x0; x < x0 + pw; ++x) cv.set(static_cast<long>(y), static_cast<long>(x), {v, v, v});
    }
  }
}

struct CueResult {
  Box sign;  // intended sign box
};

inline CueResult draw_ridge(Canvas& cv, const GeneratorParams& p, Rng& rng, std::size_t horizon, std::size_t s) {
  const std::size_t n = pick(rng, p.ridge_count_min, p.ridge_count_max);
  const std::size_t t = pick(rng, p.ridge_thickness_min, p.ridge_thickness_max);
  const std::size_t g = pick(rng, 2, 3);
  const std::size_t span = n * t + (n - 1) * g;
  const std::size_t top_lo = horizon + s + 6;
  const std::size_t top_hi = cv.h() - span - 2;
  if (top_lo > top_hi) throw InvariantError("ridge does not fit");
  const std::size_t top = pick(rng, top_lo, top_hi);
  const std::size_t x0 = pick(rng, 1, cv.w() / 8), x1 = cv.w() - pick(rng, s + 6, s + 10);
  const std::size_t phase = pick(rng, 0, 7);
  const Rgb yellow{0.95, 0.85, 0.15}, black{0.08, 0.08, 0.08};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t y0 = top + k * (t + g);
    for (std::size_t y = y0; y < y0 + t; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        cv.set_cue(static_cast<long>(y), static_cast<long>(x), ((x + phase) / 4) % 2 == 0 ? yellow : black);
      }
    }
  }
  // Sign on the right roadside, ahead of (above) the ridges.
  const std::size_t sx = cv.w() - s - pick(rng, 1, 4);
  const std::size_t sy = top - s - pick(rng, 2, 5);
  return {{sx, sy, s, s}};
}

inline CueResult draw_median_gap(Canvas& cv, const GeneratorParams& p, Rng& rng, std::size_t horizon, std::size_t s) {
  const std::size_t bw = pick(rng, p.median_width_min, p.median_width_max);
  const std::size_t xc = pick(rng, cv.w() * 35 / 100, cv.w() * 65 / 100);
  const std::size_t gh = pick(rng, p.gap_min, p.gap_max);
  const std::size_t gy = pick(rng, horizon + 4, cv.h() - gh - 4);
  const Rgb band{0.9, 0.9, 0.82};
  const std::size_t bx0 = xc - bw / 2;
  for (std::size_t y = horizon + 1; y < cv.h(); ++y) {
    if (y >= gy && y < gy + gh) continue;
    for (std::size_t x = bx0; x < bx0 + bw; ++x) cv.set_cue(static_cast<long>(y), static_cast<long>(x), band);
  }
  // Sign at the gap's neck.
  const long jx = rng.integer(-1, 1), jy = rng.integer(-1, 1);
  const long sx = static_cast<long>(xc) - static_cast<long>(s / 2) + jx;
  const long sy = std::clamp(static_cast<long>(gy + (gh - s) / 2) + jy, static_cast<long>(gy), static_cast<long>(gy + gh - s));
  return {{static_cast<std::size_t>(std::max(0L, sx)), static_cast<std::size_t>(sy), s, s}};
}

inline CueResult draw_curve(Canvas& cv, const GeneratorParams& p, Rng& rng, std::size_t horizon, std::size_t s) {
  const double r = rng.uniform(p.curve_radius_min, p.curve_radius_max);
  const double th = static_cast<double>(pick(rng, p.curve_thickness_min, p.curve_thickness_max));
  const bool right_hand = rng.bernoulli(0.5);
  const double W = static_cast<double>(cv.w()), H = static_cast<double>(cv.h());
  const double cy = rng.uniform(H - 6.0, H - 1.0);
  const double cx = right_hand ? rng.uniform(r + 2.0, W - 2.0) : rng.uniform(1.0, W - r - 3.0);
  if (cy - r < static_cast<double>(horizon) + 2.0) throw InvariantError("curve does not fit");
  // Right-hand curve: quarter arc from angle pi to 3pi/2 (center below-right);
  // left-hand: 3pi/2 to 2pi.
  const double a0 = right_hand ? std::numbers::pi : 1.5 * std::numbers::pi;
  const double a1 = a0 + 0.5 * std::numbers::pi;
  const Rgb paint{0.95, 0.95, 0.95};
  for (std::size_t y = 0; y < cv.h(); ++y) {
    for (std::size_t x = 0; x < cv.w(); ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double d = std::hypot(dx, dy);
      if (std::abs(d - r) > th / 2.0) continue;
      double a = std::atan2(dy, dx);
      if (a < 0.0) a += 2.0 * std::numbers::pi;
      if (a >= a0 && a <= a1) cv.set_cue(static_cast<long>(y), static_cast<long>(x), paint);
    }
  }
  // Sign on the outside of the bend, opposite the arc midpoint.
  const double am = 0.5 * (a0 + a1);
  const double off = r + th / 2.0 + 3.0 + static_cast<double>(s) / 2.0 + rng.uniform(0.0, 2.0);
  const double scx = cx + off * std::cos(am), scy = cy + off * std::sin(am);
  const long sx = std::lround(scx - static_cast<double>(s) / 2.0);
  const long sy = std::lround(scy - static_cast<double>(s) / 2.0);
  if (sx < 0 || sy < 0) throw InvariantError("curve sign off image");
  return {{static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), s, s}};
}

inline void draw_sign(Canvas& cv, const Box& b) {
  const Rgb red{0.85, 0.1, 0.1}, white{0.96, 0.96, 0.96}, dark{0.1, 0.1, 0.12};
  for (std::size_t y = b.y; y < b.y + b.h; ++y) {
    for (std::size_t x = b.x; x < b.x + b.w; ++x) {
      const bool border = y == b.y || x == b.x || y + 1 == b.y + b.h || x + 1 == b.x + b.w;
      cv.set(static_cast<long>(y), static_cast<long>(x), border ? red : white);
    }
  }
  const std::size_t my = b.y + b.h / 2 - 1, mx = b.x + b.w / 2 - 1;
  for (std::size_t y = my; y < my + 2; ++y) {
    for (std::size_t x = mx; x < mx + 2; ++x) cv.set(static_cast<long>(y), static_cast<long>(x), dark);
  }
}

inline bool box_clear(const Canvas& cv, const Box& b) {
  if (b.x + b.w > cv.w() || b.y + b.h > cv.h()) return false;
  for (std::size_t y = b.y; y < b.y + b.h; ++y) {
    for (std::size_t x = b.x; x < b.x + b.w; ++x) {
      if (cv.cue_at(y, x)) return false;
    }
  }
  return true;
}

}  // namespace detail

// Renders one scene. Geometry is drawn from `layout`, pixel noise and
// brightness from `noise`; passing the same Rng for both is fine.
inline SyntheticScene render_scene(const GeneratorParams& p, Subset subset, Rng& layout, Rng& noise) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    detail::Canvas cv(p.height, p.width);
    const auto horizon = static_cast<std::size_t>(
        std::lround(static_cast<double>(p.height) * layout.uniform(p.horizon_low, p.horizon_high)));
    detail::draw_background(cv, p, layout, horizon);
    const std::size_t s = detail::pick(layout, p.sign_min, p.sign_max);

    SyntheticScene sc;
    sc.height = p.height;
    sc.width = p.width;
    sc.subset = subset;
    std::optional<Box> sign;
    try {
      if (subset_has_cue(subset)) {
        sc.cue_type = p.cue_types[layout.index(p.cue_types.size())];
        detail::CueResult res;
        switch (sc.cue_type) {
          case CueType::Ridge: res = detail::draw_ridge(cv, p, layout, horizon, s); break;
          case CueType::MedianGap: res = detail::draw_median_gap(cv, p, layout, horizon, s); break;
          default: res = detail::draw_curve(cv, p, layout, horizon, s); break;
        }
        sign = res.sign;
      } else if (subset == Subset::S3) {
        sign = Box{detail::pick(layout, 1, p.width - s - 1), detail::pick(layout, 1, p.height - s - 1), s, s};
      }
    } catch (const InvariantError&) {
      continue;
    }
    if (sign && !detail::box_clear(cv, *sign)) continue;

    sc.missing_mask.assign(p.height * p.width, 0);
    if (sign) {
      sc.sign_boxes.push_back(*sign);
      if (subset_renders_sign(subset)) {
        detail::draw_sign(cv, *sign);
      } else {
        for (std::size_t y = sign->y; y < sign->y + sign->h; ++y) {
          for (std::size_t x = sign->x; x < sign->x + sign->w; ++x) sc.missing_mask[y * p.width + x] = 1;
        }
      }
    }
    const double gain = noise.uniform(0.9, 1.1);
    sc.image = std::move(cv.pixels());
    for (double& v : sc.image) v = std::clamp(v * gain + p.noise_sigma * noise.normal(), 0.0, 1.0);
    sc.cue_mask = std::move(cv.cue());
    return sc;
  }
  throw InvariantError("render_scene: could not place a valid layout in 64 attempts");
}

// Round-robin, so subset counts differ by at most one for any n.
inline Subset balanced_subset(std::size_t i) { return static_cast<Subset>(i % 4); }

// Deterministic in (params, n, seed); scene i uses stream (seed, i), so any
// subrange can be regenerated independently.
inline std::vector<SyntheticScene> generate(const GeneratorParams& p, std::size_t n, std::uint64_t seed) {
  p.validate();
  if (n == 0) throw UsageError("generate: n must be positive");
  std::vector<SyntheticScene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, i);
    Subset subset;
    if (p.balanced) {
      subset = balanced_subset(i);
    } else {
      const double total = p.subset_weights[0] + p.subset_weights[1] + p.subset_weights[2] + p.subset_weights[3];
      double u = rng.uniform() * total;
      subset = Subset::S4;
      for (int k = 0; k < 4; ++k) {
        if (u < p.subset_weights[static_cast<std::size_t>(k)]) {
          subset = static_cast<Subset>(k);
          break;
        }
        u -= p.subset_weights[static_cast<std::size_t>(k)];
      }
    }
    SyntheticScene sc = render_scene(p, subset, rng, rng);
    sc.seed = mix_seed(seed, i);
    sc.index = i;
    out.push_back(std::move(sc));
  }
  return out;
}

// Video analog: each interval keeps one layout across its frames and
// re-draws noise and gain per frame. Even interval ids are missing-sign
// intervals (S2); odd ones cycle through S1, S3, S4.
inline std::vector<SyntheticScene> generate_intervals(const GeneratorParams& p, std::size_t intervals,
                                                      std::size_t frames, std::uint64_t seed) {
  p.validate();
  if (intervals == 0 || frames == 0) throw UsageError("generate_intervals: empty request");
  static constexpr std::array<Subset, 3> others{Subset::S1, Subset::S3, Subset::S4};
  std::vector<SyntheticScene> out;
  for (std::size_t iv = 0; iv < intervals; ++iv) {
    const Subset subset = iv % 2 == 0 ? Subset::S2 : others[(iv / 2) % 3];
    for (std::size_t f = 0; f < frames; ++f) {
      Rng layout(seed, 1'000'000 + iv);
      Rng noise(seed, 2'000'000 + iv * frames + f);
      SyntheticScene sc = render_scene(p, subset, layout, noise);
      sc.index = out.size();
      sc.seed = mix_seed(seed, 2'000'000 + iv * frames + f);
      sc.interval = iv;
      out.push_back(std::move(sc));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SceneSplits {
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> val;
  std::vector<SyntheticScene> test;
};

// Stratified by subset: each subset is shuffled, the subsets are interleaved
// round-robin, and the interleaved order is cut at round(n * ratio).
inline SceneSplits split(const std::vector<SyntheticScene>& scenes, std::array<double, 3> ratios, std::uint64_t seed) {
  if (scenes.empty()) throw DataError("split: no scenes");
  for (double r : ratios) {
    if (r < 0.0) throw UsageError("split: negative ratio");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw UsageError("split: ratios must sum to 1");
  std::array<std::vector<std::size_t>, 4> strata;
  for (std::size_t i = 0; i < scenes.size(); ++i) strata[static_cast<std::size_t>(scenes[i].subset)].push_back(i);
  Rng rng(seed, 0x5EED);
  for (auto& s : strata) rng.shuffle(s.begin(), s.end());
  std::vector<std::size_t> order;
  for (std::size_t k = 0; order.size() < scenes.size(); ++k) {
    for (const auto& s : strata) {
      if (k < s.size()) order.push_back(s[k]);
    }
  }
  const auto n = static_cast<double>(scenes.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * ratios[0]));
  const auto n_val = std::min(scenes.size() - n_train, static_cast<std::size_t>(std::llround(n * ratios[1])));
  SceneSplits out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const SyntheticScene& sc = scenes[order[k]];
    if (k < n_train) {
      out.train.push_back(sc);
    } else if (k < n_train + n_val) {
      out.val.push_back(sc);
    } else {
      out.test.push_back(sc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

// Stacks scene images into a (B, H, W, 3) batch.
inline Tensor4 stack_images(const std::vector<const SyntheticScene*>& scenes) {
  if (scenes.empty()) throw DataError("stack_images: empty batch");
  const std::size_t h = scenes.front()->height, w = scenes.front()->width;
  Tensor4 t({scenes.size(), h, w, 3});
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    if (scenes[b]->height != h || scenes[b]->width != w) throw ShapeError("stack_images: mixed image sizes");
    std::copy(scenes[b]->image.begin(), scenes[b]->image.end(), t.ptr() + b * h * w * 3);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Export / import: images/NNNN.ppm (P6), masks/NNNN.pgm (P5; 0 background,
// 128 cue, 255 missing sign), meta.jsonl.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kMaskCue = 128;
inline constexpr std::uint8_t kMaskMissing = 255;

inline std::string scene_stem(std::size_t index) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

inline std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void write_pnm(const std::filesystem::path& path, char kind, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(path.string() + ": cannot open for writing");
  os << 'P' << kind << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError(path.string() + ": write failed");
}

struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> bytes;
};

// Reads binary P6 (channels 3) or P5 (channels 1) with maxval 255. Errors
// carry the file name and the byte offset where parsing failed.
inline PnmImage read_pnm(const std::filesystem::path& path, char expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path.string() + ": cannot open");
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t off, const std::string& msg) -> DataError {
    return DataError(path.string() + ": byte offset " + std::to_string(off) + ": " + msg);
  };
  if (data.size() < 2 || data[0] != 'P') throw fail(0, "bad magic");
  if (data[1] != expected_kind) throw fail(1, std::string("expected P") + expected_kind);
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
      v = v * 10 + static_cast<std::size_t>(data[pos] - '0');
      ++pos;
      if (v > 1'000'000) throw fail(start, "number out of range");
    }
    if (pos == start) throw fail(start, "expected a number");
    return v;
  };
  PnmImage img;
  img.width = number();
  img.height = number();
  const std::size_t maxval_at = pos;
  const std::size_t maxval = number();
  if (maxval != 255) throw fail(maxval_at, "maxval must be 255");
  if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos]))) throw fail(pos, "missing separator");
  ++pos;
  img.channels = expected_kind == '6' ? 3 : 1;
  const std::size_t need = img.width * img.height * img.channels;
  if (data.size() - pos < need) throw fail(data.size(), "truncated pixel data");
  img.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

inline nlohmann::json scene_meta(const SyntheticScene& sc) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box& b : sc.sign_boxes) boxes.push_back({b.x, b.y, b.w, b.h});
  nlohmann::json j{{"index", sc.index},   {"file", scene_stem(sc.index)}, {"height", sc.height},
                   {"width", sc.width},   {"cue_type", cue_type_name(sc.cue_type)},
                   {"subset", subset_name(sc.subset)}, {"sign_boxes", boxes}, {"seed", sc.seed}};
  if (sc.interval) j["interval"] = *sc.interval;
  return j;
}

inline void export_scenes(const std::vector<SyntheticScene>& scenes, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ofstream meta(dir / "meta.jsonl");
  if (!meta) throw DataError((dir / "meta.jsonl").string() + ": cannot open for writing");
  for (const SyntheticScene& sc : scenes) {
    const std::string stem = scene_stem(sc.index);
    std::vector<std::uint8_t> rgb(sc.image.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = quantize(sc.image[i]);
    write_pnm(dir / "images" / (stem + ".ppm"), '6', sc.width, sc.height, rgb);
    std::vector<std::uint8_t> mask(sc.height * sc.width, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (sc.cue_mask[i]) mask[i] = kMaskCue;
      if (sc.missing_mask[i]) mask[i] = kMaskMissing;
    }
    write_pnm(dir / "masks" / (stem + ".pgm"), '5', sc.width, sc.height, mask);
    meta << scene_meta(sc).dump() << '\n';
  }
}

inline std::vector<SyntheticScene> import_scenes(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.jsonl";
  std::ifstream meta(meta_path);
  if (!meta) throw DataError(meta_path.string() + ": cannot open");
  std::vector<SyntheticScene> out;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(meta, line)) {
    const std::size_t line_at = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    SyntheticScene sc;
    std::string stem;
    try {
      const auto j = nlohmann::json::parse(line);
      sc.index = j.at("index").get<std::size_t>();
      stem = j.at("file").get<std::string>();
      sc.height = j.at("height").get<std::size_t>();
      sc.width = j.at("width").get<std::size_t>();
      sc.cue_type = parse_cue_type(j.at("cue_type").get<std::string>());
      sc.subset = parse_subset(j.at("subset").get<std::string>());
      sc.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& b : j.at("sign_boxes")) {
        sc.sign_boxes.push_back({b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>(),
                                 b.at(3).get<std::size_t>()});
      }
      if (j.contains("interval")) sc.interval = j.at("interval").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(meta_path.string() + ": byte offset " + std::to_string(line_at) + ": " + e.what());
    }
    const auto img_path = dir / "images" / (stem + ".ppm");
    const PnmImage img = read_pnm(img_path, '6');
    if (img.width != sc.width || img.height != sc.height) throw DataError(img_path.string() + ": size differs from meta");
    sc.image.resize(img.bytes.size());
    for (std::size_t i = 0; i < img.bytes.size(); ++i) sc.image[i] = static_cast<double>(img.bytes[i]) / 255.0;
    const auto mask_path = dir / "masks" / (stem + ".pgm");
    const PnmImage mask = read_pnm(mask_path, '5');
    if (mask.width != sc.width || mask.height != sc.height) throw DataError(mask_path.string() + ": size differs from meta");
    sc.cue_mask.assign(mask.bytes.size(), 0);
    sc.missing_mask.assign(mask.bytes.size(), 0);
    const std::size_t header = std::filesystem::file_size(mask_path) - mask.bytes.size();
    for (std::size_t i = 0; i < mask.bytes.size(); ++i) {
      const std::uint8_t v = mask.bytes[i];
      if (v == kMaskCue) {
        sc.cue_mask[i] = 1;
      } else if (v == kMaskMissing) {
        sc.missing_mask[i] = 1;
      } else if (v != 0) {
        throw DataError(mask_path.string() + ": byte offset " + std::to_string(header + i) + ": invalid mask value " +
                        std::to_string(v));
      }
    }
    out.push_back(std::move(sc));
  }
  if (out.empty()) throw DataError(meta_path.string() + ": no scenes");
  return out;
}

}  // namespace cuecan
