#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cuecan/autodiff.hpp"
#include "cuecan/error.hpp"
#include "cuecan/ops.hpp"

namespace cuecan {

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// log(sigmoid(x)) = -softplus(-x)
inline double log_sigmoid(double x) { return -softplus(-x); }

// Mean binary cross-entropy on logits, in the max(z,0) - z*y + log1p(exp(-|z|)) form.
inline Var bce_with_logits(Var logits, std::span<const double> labels) {
  Tape& tape = *logits.tape;
  const Tensor4& Z = logits.value();
  if (Z.size() != labels.size()) {
    throw ShapeError("bce_with_logits: " + std::to_string(Z.size()) + " logits vs " + std::to_string(labels.size()) +
                     " labels");
  }
  if (Z.size() == 0) throw ShapeError("bce_with_logits: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const double z = Z[i];
    acc += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double n = static_cast<double>(Z.size());
  std::vector<double> y(labels.begin(), labels.end());
  return tape.record(Tensor4({1, 1, 1, 1}, acc / n), tape.requires_grad(logits),
                     [logits, y = std::move(y), n](Tape& t, std::size_t self) {
                       const double g = t.grad(self)[0];
                       const Tensor4& Z = t.value(logits);
                       Tensor4& gz = t.grad(logits);
                       for (std::size_t i = 0; i < Z.size(); ++i) gz[i] += g * (sigmoid(Z[i]) - y[i]) / n;
                     });
}

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

// Per-pixel focal term -alpha_t (1 - p_t)^gamma log p_t for one logit and a
// binary target.
inline double focal_term(double z, double target, const FocalParams& fp) {
  const double s = target > 0.5 ? 1.0 : -1.0;
  const double alpha_t = target > 0.5 ? fp.alpha : 1.0 - fp.alpha;
  const double u = s * z;
  const double log_pt = log_sigmoid(u);
  const double one_minus_pt = sigmoid(-u);
  return -alpha_t * std::pow(one_minus_pt, fp.gamma) * log_pt;
}

// Mean focal loss over all pixels of a logit map against a binary mask of
// the same size.
inline Var focal_loss(Var logits, std::span<const double> target, const FocalParams& fp = {}) {
  if (!(fp.alpha > 0.0 && fp.alpha < 1.0)) throw UsageError("focal_loss: alpha must lie in (0, 1)");
  if (!(fp.gamma >= 0.0)) throw UsageError("focal_loss: gamma must be non-negative");
  Tape& tape = *logits.tape;
  const Tensor4& Z = logits.value();
  if (Z.size() != target.size()) throw ShapeError("focal_loss: logit map and target differ in size");
  if (Z.size() == 0) throw ShapeError("focal_loss: empty map");
  double acc = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) acc += focal_term(Z[i], target[i], fp);
  const double n = static_cast<double>(Z.size());
  std::vector<double> y(target.begin(), target.end());
  return tape.record(
      Tensor4({1, 1, 1, 1}, acc / n), tape.requires_grad(logits), [logits, y = std::move(y), n, fp](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        const Tensor4& Z = t.value(logits);
        Tensor4& gz = t.grad(logits);
        for (std::size_t i = 0; i < Z.size(); ++i) {
          const double s = y[i] > 0.5 ? 1.0 : -1.0;
          const double alpha_t = y[i] > 0.5 ? fp.alpha : 1.0 - fp.alpha;
          const double u = s * Z[i];
          const double pt = sigmoid(u);
          const double q = sigmoid(-u);  // 1 - p_t
          // dL/du = alpha_t (1 - p_t)^gamma (gamma p_t log p_t - (1 - p_t))
          const double dldu = alpha_t * std::pow(q, fp.gamma) * (fp.gamma * pt * log_sigmoid(u) - q);
          gz[i] += g * s * dldu / n;
        }
      });
}

}  // namespace cuecan
