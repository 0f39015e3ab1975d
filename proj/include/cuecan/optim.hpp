#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cuecan/autodiff.hpp"
#include "cuecan/error.hpp"

namespace cuecan {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Masked entries of a parameter keep weight,
// first and second moment at exactly zero.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamParams hp) : params_(std::move(params)), hp_(hp) {
    if (!(hp_.lr > 0.0)) throw UsageError("Adam: learning rate must be positive");
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const AdamParams& hyper() const { return hp_; }
  void set_lr(double lr) { hp_.lr = lr; }
  std::uint64_t steps() const { return t_; }
  const Tensor4& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor4& second_moment(std::size_t i) const { return v_.at(i); }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      Tensor4& m = m_[i];
      Tensor4& v = v_[i];
      if (p.grad.shape() != p.value.shape() || m.shape() != p.value.shape()) {
        throw ShapeError("Adam: parameter '" + p.name + "' changed shape since the optimizer was built");
      }
      const Tensor4* mask = p.mask ? &*p.mask : nullptr;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        if (mask != nullptr && (*mask)[k] == 0.0) {
          p.value[k] = 0.0;
          m[k] = 0.0;
          v[k] = 0.0;
          continue;
        }
        const double g = p.grad[k];
        m[k] = hp_.beta1 * m[k] + (1.0 - hp_.beta1) * g;
        v[k] = hp_.beta2 * v[k] + (1.0 - hp_.beta2) * g * g;
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        p.value[k] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  AdamParams hp_;
  std::vector<Tensor4> m_;
  std::vector<Tensor4> v_;
  std::uint64_t t_ = 0;
};

}  // namespace cuecan
