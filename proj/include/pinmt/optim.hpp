#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pinmt/params.hpp"

namespace pinmt {

struct ScheduleSpec {
  double base = 4e-4;
  std::size_t warmup = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  void validate() const {
    if (warmup < 1) throw std::invalid_argument("warmup must be at least 1");
    if (!(base > 0)) throw std::invalid_argument("learning rate must be positive");
  }
};

/// Linear warmup to `base`, then inverse square-root decay.
inline double lr_at(std::size_t step, const ScheduleSpec& s) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
  const double t = static_cast<double>(step), w = static_cast<double>(s.warmup);
  return step <= s.warmup ? s.base * t / w : s.base * std::sqrt(w / t);
}

inline double effective_rate(ParamGroup group, std::size_t step, const ScheduleSpec& s, double rho) {
  if (rho < 0) throw std::invalid_argument("rho must be non-negative");
  const double nmt = lr_at(step, s);
  return group == ParamGroup::plm ? rho * nmt : nmt;
}

struct NonFiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam with one rate per parameter group. Moments are kept
/// in the store's insertion order.
template <class T>
class Adam {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  Adam() = default;
  Adam(const ParamStore<T>& store, ScheduleSpec schedule, double rho) : schedule_(schedule), rho_(rho) {
    schedule_.validate();
    if (rho < 0) throw std::invalid_argument("rho must be non-negative");
    for (const auto& e : store.entries()) moments_.push_back({std::vector<T>(e.tensor.size()), std::vector<T>(e.tensor.size())});
  }

  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  const ScheduleSpec& schedule() const { return schedule_; }
  double rho() const { return rho_; }
  std::vector<Moments>& moments() { return moments_; }
  const std::vector<Moments>& moments() const { return moments_; }

  /// Applies one update from the gradients currently held by the store.
  /// Parameters not requiring gradients, or with a zero rate, are untouched.
  void step(ParamStore<T>& store) {
    auto& entries = store.entries();
    if (entries.size() != moments_.size()) throw std::logic_error("Adam: parameter store changed shape");
    for (const auto& e : entries) {
      if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
      for (T g : e.tensor.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NonFiniteGradient("non-finite gradient in parameter '" + e.name + "' at step " +
                                  std::to_string(step_ + 1));
    }
    ++step_;
    const double c1 = 1.0 - std::pow(schedule_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(schedule_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(schedule_.beta1), b2 = static_cast<T>(schedule_.beta2);
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& e = entries[k];
      if (!e.tensor.requires_grad()) continue;
      const double rate = effective_rate(e.group, step_, schedule_, rho_);
      if (rate == 0.0) continue;
      auto& mo = moments_[k];
      auto values = e.tensor.mutable_values();
      const bool has = e.tensor.has_grad();
      const T* g = has ? e.tensor.grad().data() : nullptr;
      const T lr = static_cast<T>(rate), ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
      const T eps = static_cast<T>(schedule_.eps);
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T gi = has ? g[i] : T(0);
        mo.m[i] = b1 * mo.m[i] + (T(1) - b1) * gi;
        mo.v[i] = b2 * mo.v[i] + (T(1) - b2) * gi * gi;
        values[i] -= lr * (mo.m[i] * ic1) / (std::sqrt(mo.v[i] * ic2) + eps);
      }
    }
  }

 private:
  ScheduleSpec schedule_;
  double rho_ = 1.0;
  std::size_t step_ = 0;
  std::vector<Moments> moments_;
};

}  // namespace pinmt
