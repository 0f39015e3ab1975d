#pragma once

// Cue-driven contextual attention unit.
//
// The input map is average-pooled to (N, W/2), each pooled row (resp.
// column) is re-synthesized from its neighbours by a convolution whose
// central rows (resp. columns) are frozen at zero, the reconstructions are
// upsampled back and subtracted from the input, and [F, F - F'_h, F - F'_v]
// is merged back to C channels by a 1x1 conv + ReLU. Regions that context
// reconstructs well (sky, road) cancel; discontinuities such as ridges or
// gaps survive the subtraction.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cuecan/autodiff.hpp"
#include "cuecan/error.hpp"
#include "cuecan/ops.hpp"
#include "cuecan/rng.hpp"

namespace cuecan {

enum class KernelVariant { CenterMasked, EdgeOnly };
enum class FillOrientation { RowFill, ColumnFill };
// Full mixes channels in the filling convs; Depthwise restricts each output
// channel to its own input channel.
enum class FillMode { Full, Depthwise };

struct Mask2D {
  std::size_t k = 0;
  std::vector<std::uint8_t> bits;  // row-major k x k

  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * k + c]; }
  std::size_t ones() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  std::vector<double> as_weights() const { return {bits.begin(), bits.end()}; }
  bool operator==(const Mask2D&) const = default;
};

inline Mask2D build_mask(std::size_t k, KernelVariant variant, FillOrientation orientation) {
  if (k != 3 && k != 5) throw UsageError("build_mask: kernel size must be 3 or 5, got " + std::to_string(k));
  Mask2D m{k, std::vector<std::uint8_t>(k * k, 0)};
  // Learnable rows for RowFill; columns are the transpose.
  auto learnable = [&](std::size_t i) {
    if (variant == KernelVariant::EdgeOnly) return i == 0 || i == k - 1;
    const std::size_t frozen = k == 3 ? 1 : 3;  // central row(s) fixed to zero
    const std::size_t lo = (k - frozen) / 2;
    return i < lo || i >= lo + frozen;
  };
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t line = orientation == FillOrientation::RowFill ? r : c;
      m.bits[r * k + c] = learnable(line) ? 1 : 0;
    }
  }
  return m;
}

// One placement: a unit after encoder block `block` (3, 4 or 5).
struct UnitSpec {
  int block = 3;
  std::size_t k = 3;
  bool edge_only = false;

  KernelVariant variant() const { return edge_only ? KernelVariant::EdgeOnly : KernelVariant::CenterMasked; }
  bool operator==(const UnitSpec&) const = default;
};

struct CueCanConfig {
  std::vector<UnitSpec> units;  // empty = vanilla encoder
  std::size_t pooled_rows = 8;
  FillMode fill = FillMode::Full;

  bool empty() const { return units.empty(); }
  bool operator==(const CueCanConfig&) const = default;
};

// "5e5e3" -> blocks 3, 4, 5 with kernels 5 (edge), 5 (edge), 3 (center).
// The empty string is the vanilla encoder.
inline CueCanConfig parse_cuecan_config(const std::string& text) {
  CueCanConfig cfg;
  if (text.empty()) return cfg;
  std::size_t i = 0;
  int block = 3;
  while (i < text.size()) {
    if (block > 5) throw UsageError("cuecan config '" + text + "': more than three tokens");
    const char ch = text[i];
    if (ch != '3' && ch != '5') {
      throw UsageError("cuecan config '" + text + "': expected 3 or 5 at position " + std::to_string(i));
    }
    UnitSpec u{block, static_cast<std::size_t>(ch - '0'), false};
    ++i;
    if (i < text.size() && text[i] == 'e') {
      u.edge_only = true;
      ++i;
    }
    cfg.units.push_back(u);
    ++block;
  }
  if (cfg.units.size() != 3) throw UsageError("cuecan config '" + text + "': expected three tokens");
  return cfg;
}

inline std::string render_cuecan_config(const CueCanConfig& cfg) {
  std::string s;
  for (const UnitSpec& u : cfg.units) {
    s += std::to_string(u.k);
    if (u.edge_only) s += 'e';
  }
  return s;
}

// Glorot-uniform over active (unmasked) entries; masked entries are 0.
inline void init_glorot(Parameter& p, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double v = rng.uniform(-limit, limit);
    p.value[i] = (p.mask && (*p.mask)[i] == 0.0) ? 0.0 : v;
  }
}

class CueCanUnit {
 public:
  CueCanUnit() = default;

  // `prefix` names the parameters, e.g. "cuecan.b4".
  CueCanUnit(const std::string& prefix, std::size_t channels, const UnitSpec& spec, Rng& rng,
             FillMode fill = FillMode::Full)
      : spec_(spec), channels_(channels), fill_(fill) {
    if (channels == 0) throw ShapeError("CueCanUnit: zero channels");
    row_w_ = make_fill_weight(prefix + ".rowfill.weight", FillOrientation::RowFill, rng);
    row_b_ = Parameter(prefix + ".rowfill.bias", Tensor4({1, 1, 1, channels}));
    col_w_ = make_fill_weight(prefix + ".colfill.weight", FillOrientation::ColumnFill, rng);
    col_b_ = Parameter(prefix + ".colfill.bias", Tensor4({1, 1, 1, channels}));
    merge_w_ = Parameter(prefix + ".merge.weight", Tensor4({1, 1, 3 * channels, channels}));
    init_glorot(merge_w_, 3 * channels, channels, rng);
    merge_b_ = Parameter(prefix + ".merge.bias", Tensor4({1, 1, 1, channels}));
  }

  const UnitSpec& spec() const { return spec_; }
  std::size_t channels() const { return channels_; }
  FillMode fill_mode() const { return fill_; }

  Parameter& rowfill_weight() { return row_w_; }
  Parameter& rowfill_bias() { return row_b_; }
  Parameter& colfill_weight() { return col_w_; }
  Parameter& colfill_bias() { return col_b_; }
  Parameter& merge_weight() { return merge_w_; }
  Parameter& merge_bias() { return merge_b_; }

  std::vector<Parameter*> parameters() { return {&row_w_, &row_b_, &col_w_, &col_b_, &merge_w_, &merge_b_}; }

 private:
  Parameter make_fill_weight(const std::string& name, FillOrientation o, Rng& rng) const {
    const std::size_t k = spec_.k;
    const Mask2D spatial = build_mask(k, spec_.variant(), o);
    Parameter p(name, Tensor4({k, k, channels_, channels_}));
    Tensor4 mask(p.value.shape());
    for (std::size_t tap = 0; tap < k * k; ++tap) {
      for (std::size_t ci = 0; ci < channels_; ++ci) {
        for (std::size_t co = 0; co < channels_; ++co) {
          const bool channel_ok = fill_ == FillMode::Full || ci == co;
          mask[(tap * channels_ + ci) * channels_ + co] = (spatial.bits[tap] != 0 && channel_ok) ? 1.0 : 0.0;
        }
      }
    }
    p.mask = std::move(mask);
    const std::size_t taps = spatial.ones();
    const std::size_t fan = fill_ == FillMode::Full ? taps * channels_ : taps;
    init_glorot(p, fan, fan, rng);
    return p;
  }

  UnitSpec spec_;
  std::size_t channels_ = 0;
  FillMode fill_ = FillMode::Full;
  Parameter row_w_, row_b_, col_w_, col_b_, merge_w_, merge_b_;
};

// Every intermediate of one unit evaluation.
struct CueCanTrace {
  Var pooled;    // (B, N, W/2, C)
  Var horiz;     // row-filled pooled map
  Var vert;      // column-filled pooled map
  Var horiz_up;  // F'_horiz, (B, H, W, C)
  Var vert_up;   // F'_vert
  Var diff_h;    // F - F'_horiz
  Var diff_v;    // F - F'_vert
  Var concat;    // (B, H, W, 3C)
  Var out;       // (B, H, W, C)
};

inline CueCanTrace cuecan_forward(Var F, CueCanUnit& unit, std::size_t pooled_rows = 8) {
  Tape& tape = *F.tape;
  const Shape s = F.shape();
  if (s.c != unit.channels()) {
    throw ShapeError("cuecan_forward: input has " + std::to_string(s.c) + " channels, unit expects " +
                     std::to_string(unit.channels()));
  }
  if (pooled_rows == 0 || s.h < pooled_rows) {
    throw ShapeError("cuecan_forward: feature height " + std::to_string(s.h) + " below pooled rows " +
                     std::to_string(pooled_rows));
  }
  if (s.w < 2) throw ShapeError("cuecan_forward: feature width below 2");

  CueCanTrace tr;
  tr.pooled = adaptive_avg_pool(F, pooled_rows, std::max<std::size_t>(1, s.w / 2));

  Parameter& rw = unit.rowfill_weight();
  Parameter& cw = unit.colfill_weight();
  tr.horiz = conv2d(tr.pooled, tape.param(rw), tape.param(unit.rowfill_bias()), ConvOptions{-1, -1, rw.mask->data()});
  tr.vert = conv2d(tr.pooled, tape.param(cw), tape.param(unit.colfill_bias()), ConvOptions{-1, -1, cw.mask->data()});
  tr.horiz_up = bilinear_upsample(tr.horiz, s.h, s.w);
  tr.vert_up = bilinear_upsample(tr.vert, s.h, s.w);
  tr.diff_h = sub(F, tr.horiz_up);
  tr.diff_v = sub(F, tr.vert_up);
  tr.concat = concat_channels({F, tr.diff_h, tr.diff_v});
  tr.out = relu(conv2d(tr.concat, tape.param(unit.merge_weight()), tape.param(unit.merge_bias())));
  return tr;
}

}  // namespace cuecan
