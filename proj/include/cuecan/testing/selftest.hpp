#pragma once

// Gradient-check and oracle-equivalence suites shared by the test binaries
// and the `selftest` command.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/blobs.hpp"
#include "cuecan/cuecan_unit.hpp"
#include "cuecan/losses.hpp"
#include "cuecan/ops.hpp"
#include "cuecan/postproc.hpp"
#include "cuecan/rng.hpp"
#include "cuecan/testing/gradcheck.hpp"
#include "cuecan/testing/oracles.hpp"

namespace cuecan::selftest {

struct Outcome {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // max relative error (gradients) or max abs diff (oracles)
  double tolerance = 0.0;
  std::size_t trials = 0;
  std::string detail;

  nlohmann::json json() const {
    return {{"name", name}, {"passed", passed}, {"worst", worst}, {"tolerance", tolerance}, {"trials", trials},
            {"detail", detail}};
  }
};

inline Tensor4 random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Distinct values at least 0.02 apart and 0.05 away from zero, so finite
// differences never straddle a relu or max-pool kink.
inline Tensor4 kink_free_tensor(Rng& rng, Shape s) {
  Tensor4 t(s);
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.05 + 0.02 * static_cast<double>(perm[i]));
  }
  return t;
}

// Random linear functional of `out`, so every output entry gets a distinct
// nonzero weight.
inline Var project(Tape& t, Var out, Rng& rng) {
  return sum(mul(out, t.constant(random_tensor(rng, out.shape(), 0.5, 1.5))));
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

struct GradCase {
  std::string name;
  // Runs one randomized trial, returning the check result.
  std::function<gradcheck::Result(Rng&)> trial;
};

inline std::vector<GradCase> gradient_cases() {
  using gradcheck::check;
  std::vector<GradCase> cases;
  auto dim = [](Rng& r, std::size_t lo, std::size_t hi) { return static_cast<std::size_t>(r.integer(lo, hi)); };

  cases.push_back({"conv2d", [dim](Rng& r) {
    const std::size_t k = r.bernoulli(0.5) ? 3 : 1, cin = dim(r, 1, 3), cout = dim(r, 1, 3);
    const int pad = static_cast<int>(r.integer(0, static_cast<std::int64_t>(k) - 1));
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), dim(r, k, 5), dim(r, k, 5), cin});
    const Tensor4 w = random_tensor(r, {k, k, cin, cout});
    const Tensor4 b = random_tensor(r, {1, 1, 1, cout});
    const std::uint64_t ps = r.next();
    return check([ps, pad](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, conv2d(v[0], v[1], v[2], ConvOptions{pad, pad, {}}), pr);
    }, {x, w, b});
  }});

  cases.push_back({"conv2d_masked", [dim](Rng& r) {
    const std::size_t k = r.bernoulli(0.5) ? 3 : 5, c = dim(r, 1, 2);
    std::vector<double> mask(k * k);
    for (double& m : mask) m = r.bernoulli(0.6) ? 1.0 : 0.0;
    const Tensor4 x = random_tensor(r, {1, dim(r, 2, 6), dim(r, 2, 6), c});
    Parameter w("w", random_tensor(r, {k, k, c, c}));
    Tensor4 full(w.value.shape());
    for (std::size_t i = 0; i < full.size(); ++i) full[i] = mask[i / (c * c)];
    w.mask = full;
    w.apply_mask();
    const std::uint64_t ps = r.next();
    return check([ps, &w](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, conv2d(v[0], t.param(w), Var{}, ConvOptions{-1, -1, w.mask->data()}), pr);
    }, {x}, {&w});
  }});

  cases.push_back({"conv_transpose2d", [dim](Rng& r) {
    const std::size_t cin = dim(r, 1, 2), cout = dim(r, 1, 2), k = dim(r, 2, 4), stride = dim(r, 1, 2);
    const std::size_t pad = static_cast<std::size_t>(r.integer(0, static_cast<std::int64_t>(k / 2)));
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), dim(r, 2, 4), dim(r, 2, 4), cin});
    const Tensor4 w = random_tensor(r, {k, k, cin, cout});
    const Tensor4 b = random_tensor(r, {1, 1, 1, cout});
    const std::uint64_t ps = r.next();
    return check([ps, stride, pad](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, conv_transpose2d(v[0], v[1], v[2], stride, pad), pr);
    }, {x, w, b});
  }});

  cases.push_back({"max_pool2x2", [dim](Rng& r) {
    const Tensor4 x = kink_free_tensor(r, {dim(r, 1, 2), 2 * dim(r, 1, 3), 2 * dim(r, 1, 3), dim(r, 1, 3)});
    const std::uint64_t ps = r.next();
    return check([ps](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, max_pool2x2(v[0]), pr);
    }, {x});
  }});

  cases.push_back({"adaptive_avg_pool", [dim](Rng& r) {
    const std::size_t h = dim(r, 1, 7), w = dim(r, 1, 7);
    const std::size_t oh = dim(r, 1, h), ow = dim(r, 1, w);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), h, w, dim(r, 1, 2)});
    const std::uint64_t ps = r.next();
    return check([ps, oh, ow](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, adaptive_avg_pool(v[0], oh, ow), pr);
    }, {x});
  }});

  cases.push_back({"bilinear_upsample", [dim](Rng& r) {
    const std::size_t h = dim(r, 1, 4), w = dim(r, 1, 4);
    const std::size_t oh = dim(r, h, 9), ow = dim(r, w, 9);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), h, w, dim(r, 1, 2)});
    const std::uint64_t ps = r.next();
    return check([ps, oh, ow](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, bilinear_upsample(v[0], oh, ow), pr);
    }, {x});
  }});

  cases.push_back({"elementwise", [dim](Rng& r) {
    const Shape s{dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)};
    const Tensor4 a = random_tensor(r, s), b = random_tensor(r, s);
    const double k = r.uniform(-2.0, 2.0);
    const std::uint64_t ps = r.next();
    return check([ps, k](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, scale(sub(mul(v[0], v[1]), add(v[0], v[1])), k), pr);
    }, {a, b});
  }});

  cases.push_back({"relu", [dim](Rng& r) {
    const Tensor4 x = kink_free_tensor(r, {1, dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 3)});
    const std::uint64_t ps = r.next();
    return check([ps](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, relu(v[0]), pr);
    }, {x});
  }});

  cases.push_back({"sigmoid", [dim](Rng& r) {
    const Tensor4 x = random_tensor(r, {1, dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 3)}, -4.0, 4.0);
    const std::uint64_t ps = r.next();
    return check([ps](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, sigmoid(v[0]), pr);
    }, {x});
  }});

  cases.push_back({"concat_channels", [dim](Rng& r) {
    const std::size_t b = dim(r, 1, 2), h = dim(r, 1, 4), w = dim(r, 1, 4);
    const Tensor4 x = random_tensor(r, {b, h, w, dim(r, 1, 3)});
    const Tensor4 y = random_tensor(r, {b, h, w, dim(r, 1, 3)});
    const std::uint64_t ps = r.next();
    return check([ps](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, concat_channels({v[0], v[1], v[0]}), pr);
    }, {x, y});
  }});

  cases.push_back({"global_avg_pool_linear", [dim](Rng& r) {
    const std::size_t c = dim(r, 1, 4), cout = dim(r, 1, 3);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), c});
    const Tensor4 w = random_tensor(r, {1, 1, c, cout});
    const Tensor4 b = random_tensor(r, {1, 1, 1, cout});
    const std::uint64_t ps = r.next();
    return check([ps](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, linear(global_avg_pool(v[0]), v[1], v[2]), pr);
    }, {x, w, b});
  }});

  cases.push_back({"reductions", [dim](Rng& r) {
    const Shape s{dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)};
    const Tensor4 x = random_tensor(r, s);
    const std::size_t pb = r.index(s.b), py = r.index(s.h), px = r.index(s.w), pc = r.index(s.c);
    return check([=](Tape&, const std::vector<Var>& v) {
      return add(add(sum(v[0]), scale(mean(v[0]), 3.0)), scale(pick(v[0], pb, py, px, pc), 2.0));
    }, {x});
  }});

  cases.push_back({"bce_with_logits", [dim](Rng& r) {
    const std::size_t n = dim(r, 1, 8);
    const Tensor4 z = random_tensor(r, {n, 1, 1, 1}, -6.0, 6.0);
    std::vector<double> y(n);
    for (double& v : y) v = r.bernoulli(0.5) ? 1.0 : 0.0;
    return check([y](Tape&, const std::vector<Var>& v) { return bce_with_logits(v[0], y); }, {z});
  }});

  cases.push_back({"focal_loss", [dim](Rng& r) {
    const Shape s{1, dim(r, 1, 5), dim(r, 1, 5), 1};
    // Beyond |z| ~ 3 the focal gradient of a confident pixel drops toward
    // 1e-9, where central differences are dominated by round-off.
    const Tensor4 z = random_tensor(r, s, -3.0, 3.0);
    std::vector<double> y(s.size());
    for (double& v : y) v = r.bernoulli(0.3) ? 1.0 : 0.0;
    const FocalParams fp{r.uniform(0.05, 0.95), r.uniform(0.0, 3.0)};
    return check([y, fp](Tape&, const std::vector<Var>& v) { return focal_loss(v[0], y, fp); }, {z});
  }});

  cases.push_back({"cuecan_unit", [](Rng& r) {
    UnitSpec spec{3, r.bernoulli(0.5) ? std::size_t{3} : std::size_t{5}, r.bernoulli(0.5)};
    const FillMode fill = r.bernoulli(0.5) ? FillMode::Full : FillMode::Depthwise;
    auto unit = std::make_shared<CueCanUnit>("unit", 2, spec, r, fill);
    // Nonzero biases so that every parameter influences the output.
    for (Parameter* p : unit->parameters()) {
      if (!p->mask) {
        for (double& v : p->value.data()) v += r.uniform(-0.2, 0.2);
      }
    }
    // Redraw until every merge pre-activation clears the relu kink by 0.01.
    Tensor4 x = random_tensor(r, {1, 8, 8, 2});
    for (int attempt = 0; attempt < 100; ++attempt) {
      Tape t;
      const CueCanTrace tr = cuecan_forward(t.constant(x), *unit, 8);
      const Tensor4 pre =
          conv2d(tr.concat, t.constant(unit->merge_weight().value), t.constant(unit->merge_bias().value)).value();
      double margin = std::numeric_limits<double>::infinity();
      for (double v : pre.data()) margin = std::min(margin, std::abs(v));
      if (margin >= 0.01) break;
      x = random_tensor(r, {1, 8, 8, 2});
    }
    const std::uint64_t ps = r.next();
    return check([ps, unit](Tape& t, const std::vector<Var>& v) {
      Rng pr(ps);
      return project(t, cuecan_forward(v[0], *unit, 8).out, pr);
    }, {x}, unit->parameters());
  }});
  return cases;
}

inline std::vector<Outcome> run_gradient_suite(std::uint64_t seed, std::size_t trials = 20, double tol = 1e-4) {
  std::vector<Outcome> out;
  std::size_t ci = 0;
  for (const GradCase& c : gradient_cases()) {
    Outcome o{c.name, true, 0.0, tol, trials, ""};
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng(seed, 10'000 * (ci + 1) + t);
      const gradcheck::Result r = c.trial(rng);
      if (r.max_rel_error > o.worst) {
        o.worst = r.max_rel_error;
        o.detail = "trial " + std::to_string(t) + ", " + r.worst;
      }
    }
    o.passed = o.worst < tol;
    out.push_back(o);
    ++ci;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

inline Tensor4 run_op(const std::function<Var(Tape&)>& f) {
  Tape t;
  return f(t).value();
}

inline std::vector<Outcome> run_oracle_suite(std::uint64_t seed, std::size_t instances = 100, double tol = 1e-12) {
  std::vector<Outcome> out;
  auto dim = [](Rng& r, std::size_t lo, std::size_t hi) { return static_cast<std::size_t>(r.integer(lo, hi)); };
  auto tensor_case = [&](const std::string& name, std::uint64_t stream,
                         const std::function<double(Rng&)>& instance) {
    Outcome o{name, true, 0.0, tol, instances, ""};
    for (std::size_t i = 0; i < instances; ++i) {
      Rng r(seed, stream + i);
      const double d = instance(r);
      if (d > o.worst || std::isnan(d)) {
        o.worst = std::isnan(d) ? std::numeric_limits<double>::infinity() : d;
        o.detail = "instance " + std::to_string(i);
      }
    }
    o.passed = o.worst <= tol;
    out.push_back(o);
  };

  tensor_case("conv2d", 1'000'000, [&](Rng& r) {
    const std::size_t kh = dim(r, 1, 5), kw = dim(r, 1, 5), cin = dim(r, 1, 3), cout = dim(r, 1, 3);
    const long ph = r.integer(0, static_cast<std::int64_t>(kh) - 1), pw = r.integer(0, static_cast<std::int64_t>(kw) - 1);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), dim(r, kh, 7), dim(r, kw, 7), cin});
    const Tensor4 w = random_tensor(r, {kh, kw, cin, cout});
    const Tensor4 b = random_tensor(r, {1, 1, 1, cout});
    std::vector<double> mask;
    if (r.bernoulli(0.5)) {
      mask.resize(kh * kw);
      for (double& m : mask) m = r.bernoulli(0.6) ? 1.0 : 0.0;
    }
    const Tensor4 got = run_op([&](Tape& t) {
      return conv2d(t.constant(x), t.constant(w), t.constant(b),
                    ConvOptions{static_cast<int>(ph), static_cast<int>(pw), mask});
    });
    return oracle::max_abs_diff(got, oracle::conv2d(x, w, &b, ph, pw, mask));
  });

  tensor_case("conv_transpose2d", 2'000'000, [&](Rng& r) {
    const std::size_t k = dim(r, 1, 4), stride = dim(r, 1, 3), cin = dim(r, 1, 3), cout = dim(r, 1, 3);
    const std::size_t pad = static_cast<std::size_t>(r.integer(0, static_cast<std::int64_t>((k - 1) / 2)));
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), dim(r, 1, 5), dim(r, 1, 5), cin});
    const Tensor4 w = random_tensor(r, {k, k, cin, cout});
    const Tensor4 got = run_op([&](Tape& t) { return conv_transpose2d(t.constant(x), t.constant(w), Var{}, stride, pad); });
    return oracle::max_abs_diff(got, oracle::conv_transpose2d(x, w, stride, pad));
  });

  tensor_case("adaptive_avg_pool", 3'000'000, [&](Rng& r) {
    const std::size_t h = dim(r, 1, 12), w = dim(r, 1, 12);
    const std::size_t oh = dim(r, 1, h), ow = dim(r, 1, w);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), h, w, dim(r, 1, 3)});
    const Tensor4 got = run_op([&](Tape& t) { return adaptive_avg_pool(t.constant(x), oh, ow); });
    return oracle::max_abs_diff(got, oracle::adaptive_avg_pool(x, oh, ow));
  });

  tensor_case("bilinear_upsample", 4'000'000, [&](Rng& r) {
    const std::size_t h = dim(r, 1, 6), w = dim(r, 1, 6);
    const std::size_t oh = dim(r, h, 16), ow = dim(r, w, 16);
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), h, w, dim(r, 1, 3)});
    const Tensor4 got = run_op([&](Tape& t) { return bilinear_upsample(t.constant(x), oh, ow); });
    return oracle::max_abs_diff(got, oracle::bilinear_upsample(x, oh, ow));
  });

  tensor_case("max_pool2x2", 5'000'000, [&](Rng& r) {
    const Tensor4 x = random_tensor(r, {dim(r, 1, 2), dim(r, 2, 9), dim(r, 2, 9), dim(r, 1, 3)});
    const Tensor4 got = run_op([&](Tape& t) { return max_pool2x2(t.constant(x)); });
    return oracle::max_abs_diff(got, oracle::max_pool2x2(x));
  });

  tensor_case("focal_loss", 6'000'000, [&](Rng& r) {
    const Shape s{dim(r, 1, 2), dim(r, 1, 8), dim(r, 1, 8), 1};
    const Tensor4 z = random_tensor(r, s, -6.0, 6.0);
    std::vector<double> y(s.size());
    for (double& v : y) v = r.bernoulli(0.3) ? 1.0 : 0.0;
    const FocalParams fp{r.uniform(0.05, 0.95), r.uniform(0.0, 4.0)};
    const Tensor4 got = run_op([&](Tape& t) { return focal_loss(t.constant(z), y, fp); });
    return std::abs(got[0] - oracle::focal_loss(z.data(), y, fp.alpha, fp.gamma));
  });

  tensor_case("bce_with_logits", 7'000'000, [&](Rng& r) {
    const std::size_t n = dim(r, 1, 32);
    const Tensor4 z = random_tensor(r, {n, 1, 1, 1}, -6.0, 6.0);
    std::vector<double> y(n);
    for (double& v : y) v = r.bernoulli(0.5) ? 1.0 : 0.0;
    const Tensor4 got = run_op([&](Tape& t) { return bce_with_logits(t.constant(z), y); });
    return std::abs(got[0] - oracle::bce(z.data(), y));
  });

  // Blob boxes, areas and pixel sets must match exactly.
  {
    Outcome o{"extract_blobs", true, 0.0, 0.0, instances, ""};
    for (std::size_t i = 0; i < instances; ++i) {
      Rng r(seed, 8'000'000 + i);
      const std::size_t h = dim(r, 1, 16), w = dim(r, 1, 16);
      const double density = r.uniform(0.1, 0.7);
      std::vector<double> prob(h * w);
      for (double& p : prob) p = r.bernoulli(density) ? r.uniform(0.5001, 1.0) : r.uniform(0.0, 0.5);
      const std::size_t min_area = dim(r, 1, 5);
      const auto got = extract_blobs(prob, h, w, 0.5, min_area);
      const auto want = oracle::extract_blobs(prob, h, w, 0.5, min_area);
      bool same = got.size() == want.size();
      for (std::size_t k = 0; same && k < got.size(); ++k) {
        same = got[k].box == want[k].box && got[k].pixels == want[k].pixels;
      }
      if (!same) {
        o.passed = false;
        o.worst = 1.0;
        o.detail = "instance " + std::to_string(i);
      }
    }
    out.push_back(o);
  }

  {
    const std::size_t intervals = std::max<std::size_t>(instances, 1000);
    Outcome o{"video_decide", true, 0.0, 0.0, intervals, ""};
    for (std::size_t i = 0; i < intervals; ++i) {
      Rng r(seed, 9'000'000 + i);
      const std::size_t n = dim(r, 1, 15);
      std::vector<FrameVerdict> frames(n);
      std::vector<bool> flags(n);
      for (std::size_t f = 0; f < n; ++f) {
        frames[f].frame = f;
        const std::size_t regions = dim(r, 0, 3);
        for (std::size_t k = 0; k < regions; ++k) {
          const int v = r.bernoulli(0.4) ? kMissing : kNotMissing;
          frames[f].boxes.push_back({0, 0, 1, 1});
          frames[f].verdicts.push_back(v);
          frames[f].votes.push_back(1.0);
          flags[f] = flags[f] || v == kMissing;
        }
      }
      if (video_decide(i, frames).missing != oracle::majority_missing(flags)) {
        o.passed = false;
        o.worst = 1.0;
        o.detail = "interval " + std::to_string(i);
      }
    }
    out.push_back(o);
  }
  return out;
}

inline bool all_passed(const std::vector<Outcome>& v) {
  return std::all_of(v.begin(), v.end(), [](const Outcome& o) { return o.passed; });
}

}  // namespace cuecan::selftest
