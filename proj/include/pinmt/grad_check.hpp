#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "pinmt/tensor.hpp"

namespace pinmt {

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Compares the reverse-mode gradient of a scalar program `f` at `x` with
/// central finite differences. Returns the largest
/// |analytic - numeric| / max(1, |analytic|, |numeric|) over coordinates.
///
/// `f` must build its graph from the tensor it is handed; other leaves it
/// captures keep whatever gradient the analytic pass deposits in them.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double h = 1e-5) {
  Tensor<T> probe = Tensor<T>::from(x.shape(), std::vector<T>(x.values().begin(), x.values().end()), true);
  Tensor<T> out = f(probe);
  if (!std::isfinite(static_cast<double>(out.item()))) throw NonFiniteError("grad_check: f(x) is not finite");
  if (!out.requires_grad()) {
    // f does not depend on x at all: the analytic gradient is zero.
    probe.mutable_grad();
  } else {
    backward(out);
  }
  std::vector<T> analytic(probe.grad().begin(), probe.grad().end());
  if (analytic.empty()) analytic.assign(x.size(), T(0));

  double worst = 0.0;
  std::vector<T> work(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const T orig = work[i];
    auto eval = [&](T v) {
      work[i] = v;
      NoGradGuard guard;
      const double y = static_cast<double>(f(Tensor<T>::from(x.shape(), work, false)).item());
      if (!std::isfinite(y)) throw NonFiniteError("grad_check: non-finite value at coordinate " + std::to_string(i));
      return y;
    };
    const double plus = eval(orig + static_cast<T>(h));
    const double minus = eval(orig - static_cast<T>(h));
    work[i] = orig;
    const double numeric = (plus - minus) / (2.0 * h);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace pinmt
