#pragma once

#include <cmath>
#include <vector>

#include "ssgan/models.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// Single-tensor Adam update, bias-corrected; t must already be incremented.
template <class T>
void adam_update(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v,
                 int64_t t, double lr, double beta1, double beta2,
                 double eps = 1e-8) {
  require(p.same_shape(g) && p.same_shape(m) && p.same_shape(v),
          ErrorCode::shape_mismatch, "adam_update: shape mismatch");
  require(t >= 1, ErrorCode::invalid_argument, "adam_update: t >= 1");
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(t))));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(t))));
  const T lrT = static_cast<T>(lr), epsT = static_cast<T>(eps);
  for (size_t i = 0; i < p.v.size(); ++i) {
    m.v[i] = b1 * m.v[i] + (T(1) - b1) * g.v[i];
    v.v[i] = b2 * v.v[i] + (T(1) - b2) * g.v[i] * g.v[i];
    T mhat = m.v[i] * c1;
    T vhat = v.v[i] * c2;
    p.v[i] -= lrT * mhat / (std::sqrt(vhat) + epsT);
  }
}

// Moments for every parameter of a set; non-trainable entries keep empty
// tensors and are never touched.
template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  int64_t t = 0;

  static AdamState init(const ParamSet<T>& ps) {
    AdamState s;
    s.m.reserve(ps.values.size());
    s.v.reserve(ps.values.size());
    for (size_t i = 0; i < ps.values.size(); ++i) {
      if (ps.trainable[i]) {
        s.m.push_back(Tensor<T>::zeros(ps.values[i].shape));
        s.v.push_back(Tensor<T>::zeros(ps.values[i].shape));
      } else {
        s.m.push_back(Tensor<T>{});
        s.v.push_back(Tensor<T>{});
      }
    }
    return s;
  }
};

// One optimizer step over a parameter set. `grads` is aligned with the set;
// empty entries mean "no gradient path" and leave both the parameter and its
// moments untouched.
template <class T>
void adam_step(ParamSet<T>& ps, const std::vector<Tensor<T>>& grads,
               AdamState<T>& state, double lr, double beta1, double beta2,
               double eps = 1e-8) {
  require(grads.size() == ps.values.size(), ErrorCode::shape_mismatch,
          "adam_step: gradient count mismatch");
  state.t += 1;
  for (size_t i = 0; i < ps.values.size(); ++i) {
    if (!ps.trainable[i] || grads[i].numel() == 0) continue;
    adam_update(ps.values[i], grads[i], state.m[i], state.v[i], state.t, lr,
                beta1, beta2, eps);
  }
}

}  // namespace ssgan
