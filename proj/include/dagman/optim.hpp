#pragma once

#include <cmath>
#include <vector>

#include "dagman/autograd.hpp"

namespace dagman {

// Linear warmup 0 -> base over steps 1..warmup, then cosine decay to 0 at
// `total`. `step` is 1-based: the learning rate used by the step-th update.
inline double warmup_cosine_lr(double base, int step, int warmup, int total) {
  if (warmup > 0 && step <= warmup) return base * double(step) / double(warmup);
  if (total <= warmup) return base;
  const double progress = std::min(1.0, double(step - warmup) / double(total - warmup));
  return base * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Teacher momentum ramped from `base` at step 0 to 1 at `total`.
inline double cosine_momentum(double base, int step, int total, bool ramp) {
  if (!ramp || total <= 0) return base;
  const double progress = std::min(1.0, double(step) / double(total));
  return 1.0 - (1.0 - base) * 0.5 * (std::cos(M_PI * progress) + 1.0);
}

// Adam with decoupled weight decay over a fixed ParamSet.
template <class T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.04;
  };

  AdamW(ag::ParamSet<T>& params, Options opt) : params_(params), opt_(opt) {
    for (const auto& p : params_.items()) {
      m_.push_back(ag::Matrix<T>::Zero(p.var->value.rows(), p.var->value.cols()));
      v_.push_back(ag::Matrix<T>::Zero(p.var->value.rows(), p.var->value.cols()));
    }
  }

  // Global L2 norm of the accumulated gradients.
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& p : params_.items())
      if (p.var->has_grad()) sq += double(p.var->grad.squaredNorm());
    return std::sqrt(sq);
  }

  void clip_grad_norm(double max_norm) {
    if (max_norm <= 0.0) return;
    const double norm = grad_norm();
    if (norm <= max_norm || !std::isfinite(norm)) return;
    const T s = T(max_norm / (norm + 1e-6));
    for (auto& p : params_.items())
      if (p.var->has_grad()) p.var->grad *= s;
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    const T b1 = T(opt_.beta1), b2 = T(opt_.beta2);
    auto& items = params_.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& p = items[i];
      if (!p.var->has_grad()) continue;
      m_[i] = b1 * m_[i] + (T(1) - b1) * p.var->grad;
      v_[i] = b2 * v_[i] + (T(1) - b2) * p.var->grad.cwiseAbs2();
      if (lr == 0.0) continue;
      if (p.decay && opt_.weight_decay > 0.0) p.var->value *= T(1.0 - lr * opt_.weight_decay);
      const T step_size = T(lr / bc1);
      const T inv_bc2 = T(1.0 / bc2);
      p.var->value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + T(opt_.eps));
    }
  }

  std::int64_t steps_taken() const noexcept { return t_; }
  void set_steps_taken(std::int64_t t) noexcept { t_ = t; }
  std::vector<ag::Matrix<T>>& first_moments() noexcept { return m_; }
  std::vector<ag::Matrix<T>>& second_moments() noexcept { return v_; }
  const std::vector<ag::Matrix<T>>& first_moments() const noexcept { return m_; }
  const std::vector<ag::Matrix<T>>& second_moments() const noexcept { return v_; }

 private:
  ag::ParamSet<T>& params_;
  Options opt_;
  std::vector<ag::Matrix<T>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace dagman
