#include <gtest/gtest.h>

#include <cmath>

#include "cuecan/cuecan_unit.hpp"
#include "cuecan/nets.hpp"
#include "cuecan/optim.hpp"
#include "cuecan/testing/gradcheck.hpp"

using namespace cuecan;

namespace {

Tensor4 random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<std::vector<int>> grid(const Mask2D& m) {
  std::vector<std::vector<int>> g(m.k, std::vector<int>(m.k));
  for (std::size_t r = 0; r < m.k; ++r) {
    for (std::size_t c = 0; c < m.k; ++c) g[r][c] = m.at(r, c);
  }
  return g;
}

// Fill kernels averaging every unmasked input of an output channel, zero
// biases, and a merge conv copying the channels of `source` (0 = F,
// 1 = D_h, 2 = D_v) to the output.
void make_probe_unit(CueCanUnit& u, double fill_scale, std::size_t source) {
  for (Parameter* p : {&u.rowfill_weight(), &u.colfill_weight()}) {
    double active = 0.0;
    for (double m : p->mask->data()) active += m;
    const double per_output = active / static_cast<double>(u.channels());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      p->value[i] = (*p->mask)[i] != 0.0 ? fill_scale / per_output : 0.0;
    }
  }
  for (Parameter* p : {&u.rowfill_bias(), &u.colfill_bias(), &u.merge_bias()}) p->value.fill(0.0);
  Tensor4& mw = u.merge_weight().value;
  mw.fill(0.0);
  const std::size_t C = u.channels();
  for (std::size_t c = 0; c < C; ++c) mw.at(0, 0, source * C + c, c) = 1.0;
}

}  // namespace

TEST(BuildMask, Examples) {
  EXPECT_EQ(grid(build_mask(3, KernelVariant::CenterMasked, FillOrientation::RowFill)),
            (std::vector<std::vector<int>>{{1, 1, 1}, {0, 0, 0}, {1, 1, 1}}));
  const auto m5 = grid(build_mask(5, KernelVariant::CenterMasked, FillOrientation::RowFill));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(m5[r][c], (r == 0 || r == 4) ? 1 : 0);
  }
  const auto e5 = grid(build_mask(5, KernelVariant::EdgeOnly, FillOrientation::ColumnFill));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(e5[r][c], (c == 0 || c == 4) ? 1 : 0);
  }
  // A 3x3 edge-only kernel coincides with the center-masked one.
  EXPECT_EQ(build_mask(3, KernelVariant::EdgeOnly, FillOrientation::RowFill),
            build_mask(3, KernelVariant::CenterMasked, FillOrientation::RowFill));
  EXPECT_THROW(build_mask(4, KernelVariant::CenterMasked, FillOrientation::RowFill), UsageError);
}

TEST(BuildMask, ColumnFillIsTransposeOfRowFill) {
  for (std::size_t k : {3u, 5u}) {
    for (auto v : {KernelVariant::CenterMasked, KernelVariant::EdgeOnly}) {
      const Mask2D r = build_mask(k, v, FillOrientation::RowFill), c = build_mask(k, v, FillOrientation::ColumnFill);
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(r.at(i, j), c.at(j, i));
      }
    }
  }
}

TEST(Config, ParseExamples) {
  const CueCanConfig c333 = parse_cuecan_config("333");
  ASSERT_EQ(c333.units.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(c333.units[i].block, static_cast<int>(3 + i));
    EXPECT_EQ(c333.units[i].k, 3u);
    EXPECT_FALSE(c333.units[i].edge_only);
  }
  EXPECT_TRUE(parse_cuecan_config("").empty());
  const CueCanConfig e = parse_cuecan_config("5e5e3");
  EXPECT_EQ(e.units[0], (UnitSpec{3, 5, true}));
  EXPECT_EQ(e.units[1], (UnitSpec{4, 5, true}));
  EXPECT_EQ(e.units[2], (UnitSpec{5, 3, false}));
  for (const char* bad : {"33", "3333", "343", "e33", "3ee33", "x"}) EXPECT_THROW(parse_cuecan_config(bad), UsageError) << bad;
}

TEST(Config, RoundTripsOverAllValidConfigs) {
  const std::vector<std::string> tokens{"3", "3e", "5", "5e"};
  std::size_t n = 0;
  for (const auto& a : tokens) {
    for (const auto& b : tokens) {
      for (const auto& c : tokens) {
        const CueCanConfig cfg = parse_cuecan_config(a + b + c);
        EXPECT_EQ(parse_cuecan_config(render_cuecan_config(cfg)), cfg);
        EXPECT_EQ(render_cuecan_config(cfg), a + b + c);
        ++n;
      }
    }
  }
  EXPECT_EQ(n, 64u);
}

TEST(CueCanForward, ShapeIdentityOnRandomInputs) {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t B = 1 + rng.index(2), H = 8 + rng.index(9), W = 2 + rng.index(12), C = 1 + rng.index(4);
    const UnitSpec spec{3, rng.bernoulli(0.5) ? 3u : 5u, rng.bernoulli(0.5)};
    CueCanUnit u("u", C, spec, rng, rng.bernoulli(0.5) ? FillMode::Full : FillMode::Depthwise);
    Tape t;
    const CueCanTrace tr = cuecan_forward(t.constant(random_tensor(rng, {B, H, W, C})), u, 8);
    EXPECT_EQ(tr.out.shape(), (Shape{B, H, W, C}));
    EXPECT_EQ(tr.pooled.shape(), (Shape{B, 8, std::max<std::size_t>(1, W / 2), C}));
    EXPECT_EQ(tr.concat.shape().c, 3 * C);
  }
}

TEST(CueCanForward, RejectsShortOrNarrowInputs) {
  Rng rng(1);
  CueCanUnit u("u", 2, UnitSpec{}, rng);
  Tape t;
  EXPECT_THROW(cuecan_forward(t.constant(Tensor4({1, 7, 8, 2})), u, 8), ShapeError);
  EXPECT_THROW(cuecan_forward(t.constant(Tensor4({1, 8, 1, 2})), u, 8), ShapeError);
  EXPECT_THROW(cuecan_forward(t.constant(Tensor4({1, 8, 8, 3})), u, 8), ShapeError);
}

// Uniform context filling reproduces a constant interior, so both difference
// maps vanish away from the zero-padded border.
TEST(CueCanForward, ConstantInteriorHasZeroDifference) {
  Rng rng(2);
  for (std::size_t k : {3u, 5u}) {
    for (bool edge : {false, true}) {
      CueCanUnit u("u", 2, UnitSpec{3, k, edge}, rng);
      make_probe_unit(u, 1.0, 1);
      Tape t;
      const CueCanTrace tr = cuecan_forward(t.constant(Tensor4({1, 16, 16, 2}, 0.7)), u, 8);
      // Pooled 8x8; cells at least k/2 from the border are unaffected by
      // padding, and rows/cols 6..9 interpolate only those.
      for (std::size_t y = 6; y < 10; ++y) {
        for (std::size_t x = 6; x < 10; ++x) {
          for (std::size_t c = 0; c < 2; ++c) {
            EXPECT_NEAR(tr.diff_h.value().at(0, y, x, c), 0.0, 1e-12);
            EXPECT_NEAR(tr.diff_v.value().at(0, y, x, c), 0.0, 1e-12);
          }
        }
      }
    }
  }
}

TEST(CueCanForward, ZeroFillingGivesReluOfInput) {
  Rng rng(3);
  CueCanUnit u("u", 3, UnitSpec{}, rng);
  make_probe_unit(u, 0.0, 0);
  Tape t;
  const Tensor4 F = random_tensor(rng, {2, 8, 6, 3});
  const CueCanTrace tr = cuecan_forward(t.constant(F), u, 8);
  EXPECT_EQ(tr.diff_h.value(), F);
  EXPECT_EQ(tr.diff_v.value(), F);
  for (std::size_t i = 0; i < F.size(); ++i) EXPECT_EQ(tr.out.value()[i], std::max(0.0, F[i]));
}

// A lone bright row is where the row-filled context disagrees most with F.
TEST(CueCanForward, RidgeRowMaximizesHorizontalDifference) {
  Rng rng(4);
  CueCanUnit u("u", 1, UnitSpec{3, 3, false}, rng);
  make_probe_unit(u, 1.0, 1);
  for (std::size_t ridge = 0; ridge < 16; ++ridge) {
    Tensor4 F({1, 16, 12, 1});
    for (std::size_t x = 0; x < 12; ++x) F.at(0, ridge, x, 0) = 1.0;
    Tape t;
    const Tensor4 D = cuecan_forward(t.constant(F), u, 8).diff_h.value();
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 12; ++x) {
        if (std::abs(D.at(0, y, x, 0)) > best) {
          best = std::abs(D.at(0, y, x, 0));
          arg = y;
        }
      }
    }
    EXPECT_EQ(arg / 2, ridge / 2) << "ridge row " << ridge;
  }
}

TEST(CueCanUnit, MaskedEntriesStartAtZero) {
  Rng rng(5);
  for (auto fill : {FillMode::Full, FillMode::Depthwise}) {
    CueCanUnit u("u", 4, UnitSpec{3, 5, true}, rng, fill);
    for (Parameter* p : {&u.rowfill_weight(), &u.colfill_weight()}) {
      ASSERT_TRUE(p->mask.has_value());
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        if ((*p->mask)[i] == 0.0) EXPECT_EQ(p->value[i], 0.0);
      }
    }
  }
}

TEST(CueCanUnit, MaskPersistsThroughHundredAdamSteps) {
  Rng rng(6);
  for (std::size_t k : {3u, 5u}) {
    for (bool edge : {false, true}) {
      CueCanUnit u("u", 2, UnitSpec{3, k, edge}, rng);
      Adam opt(u.parameters(), AdamParams{1e-2});
      const Tensor4 F = random_tensor(rng, {1, 8, 8, 2});
      const Tensor4 target = random_tensor(rng, {1, 8, 8, 2});
      for (int step = 0; step < 100; ++step) {
        opt.zero_grad();
        Tape t;
        const Var d = sub(cuecan_forward(t.constant(F), u, 8).out, t.constant(target));
        t.backward(sum(mul(d, d)));
        opt.step();
      }
      for (Parameter* p : {&u.rowfill_weight(), &u.colfill_weight()}) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          if ((*p->mask)[i] == 0.0) ASSERT_EQ(p->value[i], 0.0);
        }
      }
    }
  }
}

TEST(CueCanUnit, EndToEndGradientCheck) {
  Rng rng(7);
  for (std::size_t k : {3u, 5u}) {
    for (bool edge : {false, true}) {
      for (auto fill : {FillMode::Full, FillMode::Depthwise}) {
        CueCanUnit u("u", 2, UnitSpec{3, k, edge}, rng, fill);
        for (Parameter* p : u.parameters()) {
          for (std::size_t i = 0; i < p->value.size(); ++i) {
            if (!p->mask || (*p->mask)[i] != 0.0) p->value[i] = rng.uniform(-0.5, 0.5);
          }
        }
        const Tensor4 proj = random_tensor(rng, {1, 8, 8, 2});
        const auto res = gradcheck::check(
            [&](Tape& t, const std::vector<Var>& in) { return sum(mul(cuecan_forward(in[0], u, 8).out, t.constant(proj))); },
            {random_tensor(rng, {1, 8, 8, 2})}, u.parameters());
        EXPECT_LT(res.max_rel_error, 1e-4) << "k=" << k << " edge=" << edge << " at " << res.worst;
      }
    }
  }
}

TEST(AttachUnits, PlacesUnitsPerConfig) {
  ModelConfig mc;
  mc.cuecan = parse_cuecan_config("5e5e3");
  Model m(mc);
  const auto& blocks = m.encoder().blocks;
  for (std::size_t b = 0; b < 2; ++b) EXPECT_FALSE(blocks[b].unit.has_value());
  ASSERT_TRUE(blocks[2].unit && blocks[3].unit && blocks[4].unit);
  EXPECT_EQ(blocks[2].unit->spec(), (UnitSpec{3, 5, true}));
  EXPECT_EQ(blocks[3].unit->spec(), (UnitSpec{4, 5, true}));
  EXPECT_EQ(blocks[4].unit->spec(), (UnitSpec{5, 3, false}));

  Model vanilla(ModelConfig{});
  for (const auto& b : vanilla.encoder().blocks) EXPECT_FALSE(b.unit.has_value());
}

TEST(AttachUnits, RequiresFiveBlocks) {
  Encoder enc = make_encoder({4, 4, 4, 4}, 3, 0);
  EXPECT_THROW(attach_units(enc, parse_cuecan_config("333"), 0), ShapeError);
  EXPECT_NO_THROW(attach_units(enc, CueCanConfig{}, 0));
}
