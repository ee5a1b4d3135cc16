#pragma once

#include <functional>
#include <string>

#include "ssgan/tape.hpp"

namespace ssgan {

// A differentiable scalar expression: given a tape and the input as a leaf
// var, build and return the scalar output var.
template <class T>
using ScalarFn =
    std::function<typename Tape<T>::Var(Tape<T>&, typename Tape<T>::Var)>;

// Max over coordinates of |analytic - central_difference| / max(1, |cd|),
// with the central difference (f(x+eps e) - f(x-eps e)) / (2 eps).
template <class T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T eps) {
  require(eps > T(0), ErrorCode::invalid_argument, "grad_check: eps > 0");

  auto eval = [&](const Tensor<T>& at, int coord) -> double {
    Tape<T> tape;
    auto in = tape.leaf(at, false);
    auto out = f(tape, in);
    require(tape.value(out).numel() == 1, ErrorCode::invalid_argument,
            "grad_check: function must be scalar");
    double y = static_cast<double>(tape.value(out).v[0]);
    require(std::isfinite(y), ErrorCode::non_finite,
            "grad_check: non-finite function value at coordinate " +
                std::to_string(coord));
    return y;
  };

  Tape<T> tape;
  auto in = tape.leaf(x, true);
  auto out = f(tape, in);
  require(tape.value(out).numel() == 1, ErrorCode::invalid_argument,
          "grad_check: function must be scalar");
  require(std::isfinite(static_cast<double>(tape.value(out).v[0])),
          ErrorCode::non_finite, "grad_check: non-finite function value");
  typename Tape<T>::Var wrt[] = {in};
  Tensor<T> analytic = tape.grad_values(out, wrt)[0];

  double max_err = 0;
  Tensor<T> xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    T orig = xp.v[i];
    xp.v[i] = orig + eps;
    double fp = eval(xp, static_cast<int>(i));
    xp.v[i] = orig - eps;
    double fm = eval(xp, static_cast<int>(i));
    xp.v[i] = orig;
    double cd = (fp - fm) / (2.0 * static_cast<double>(eps));
    double err = std::abs(static_cast<double>(analytic.v[i]) - cd) /
                 std::max(1.0, std::abs(cd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace ssgan
