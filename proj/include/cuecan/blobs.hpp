#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cuecan/error.hpp"

namespace cuecan {

// Axis-aligned pixel rectangle; (x, y) is the top-left corner.
struct Box {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  std::size_t area() const { return w * h; }
  bool contains(std::size_t px, std::size_t py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool operator==(const Box&) const = default;
};

struct Blob {
  std::vector<std::size_t> pixels;  // row-major indices y * width + x, ascending
  Box box;

  std::size_t area() const { return pixels.size(); }
};

// 4-connected components of the nonzero cells of a row-major h x w grid.
// Components are discovered in scan order; pixel lists are sorted.
inline std::vector<std::vector<std::size_t>> connected_components(std::span<const std::uint8_t> on, std::size_t h,
                                                                  std::size_t w) {
  if (on.size() != h * w) throw ShapeError("connected_components: grid size mismatch");
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::uint8_t> seen(on.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < on.size(); ++start) {
    if (!on[start] || seen[start]) continue;
    std::vector<std::size_t> comp;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (on[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  return comps;
}

inline Box bounding_box(const std::vector<std::size_t>& pixels, std::size_t w) {
  std::size_t x0 = SIZE_MAX, y0 = SIZE_MAX, x1 = 0, y1 = 0;
  for (std::size_t p : pixels) {
    const std::size_t y = p / w, x = p % w;
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
  if (pixels.empty()) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

inline std::vector<std::uint8_t> threshold(std::span<const double> values, double tau) {
  std::vector<std::uint8_t> on(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) on[i] = values[i] > tau ? 1 : 0;
  return on;
}

// Tight boxes around the 4-connected components of {p > tau}. Blobs smaller
// than `min_area` pixels are dropped; the rest are ordered by area
// (largest first), then by box origin (y, x).
inline std::vector<Blob> extract_blobs(std::span<const double> prob, std::size_t h, std::size_t w, double tau,
                                       std::size_t min_area = 4) {
  if (!(tau > 0.0 && tau < 1.0)) throw UsageError("extract_blobs: threshold must lie in (0, 1)");
  const auto on = threshold(prob, tau);
  std::vector<Blob> blobs;
  for (auto& comp : connected_components(on, h, w)) {
    if (comp.size() < min_area) continue;
    Blob b;
    b.box = bounding_box(comp, w);
    b.pixels = std::move(comp);
    blobs.push_back(std::move(b));
  }
  std::stable_sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) {
    if (a.area() != b.area()) return a.area() > b.area();
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    return a.box.x < b.box.x;
  });
  return blobs;
}

// Six-value descriptor of a predicted region.
struct RegionFeatures {
  double cx = 0.0;
  double cy = 0.0;
  double h = 0.0;
  double w = 0.0;
  double dist_center = 0.0;  // from box center to image center (W/2, H/2)
  double aspect = 0.0;       // w / h

  static constexpr std::size_t kCount = 6;
  std::array<double, kCount> values() const { return {cx, cy, h, w, dist_center, aspect}; }
};

inline RegionFeatures region_features(const Box& box, std::size_t image_w, std::size_t image_h) {
  if (box.w == 0 || box.h == 0) throw ShapeError("region_features: empty box");
  RegionFeatures f;
  f.cx = static_cast<double>(box.x) + static_cast<double>(box.w) / 2.0;
  f.cy = static_cast<double>(box.y) + static_cast<double>(box.h) / 2.0;
  f.w = static_cast<double>(box.w);
  f.h = static_cast<double>(box.h);
  f.dist_center = std::hypot(f.cx - static_cast<double>(image_w) / 2.0, f.cy - static_cast<double>(image_h) / 2.0);
  f.aspect = f.w / f.h;
  return f;
}

}  // namespace cuecan
