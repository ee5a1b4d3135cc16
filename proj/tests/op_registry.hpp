#pragma once

// Registry of every differentiable op exposed by the tape and consumed by the
// models/losses, as scalar-valued probes for gradient checking. Shared by the
// unit tests and the acceptance gradient suite.

#include <functional>
#include <string>
#include <vector>

#include "ssgan/gradcheck.hpp"
#include "ssgan/rng.hpp"
#include "ssgan/tape.hpp"

namespace ssgan::testing {

template <class T>
struct OpProbe {
  std::string name;
  Shape input_shape;
  ScalarFn<T> fn;
  // Inputs are drawn from N(0,1)*scale + offset to stay away from kinks or
  // domain edges where needed.
  double scale = 1.0, offset = 0.0;
};

template <class T>
std::vector<OpProbe<T>> op_probes() {
  using V = typename Tape<T>::Var;
  std::vector<OpProbe<T>> ps;
  auto probe = [&](std::string name, Shape s,
                   std::function<V(Tape<T>&, V)> fn, double scale = 1.0,
                   double offset = 0.0) {
    ps.push_back({std::move(name), std::move(s), std::move(fn), scale, offset});
  };

  probe("add", {3, 4}, [](Tape<T>& t, V x) {
    return t.sum_all(t.add(x, t.mul_scalar(x, T(0.5))));
  });
  probe("sub", {3, 4}, [](Tape<T>& t, V x) {
    return t.sum_all(t.sub(t.mul(x, x), x));
  });
  probe("neg_mul", {5}, [](Tape<T>& t, V x) {
    return t.sum_all(t.neg(t.mul(x, x)));
  });
  probe("mul_scalarvar", {6}, [](Tape<T>& t, V x) {
    auto s = t.reshape(t.slice_rows(x, 0, 1), {1});
    return t.sum_all(t.mul_scalarvar(t.mul(x, x), s));
  });
  probe("relu", {4, 4}, [](Tape<T>& t, V x) {
    return t.sum_all(t.relu(x));
  }, 1.0, 0.3);  // offset keeps coordinates off the kink
  probe("tanh", {3, 3}, [](Tape<T>& t, V x) {
    return t.sum_all(t.tanh_op(x));
  });
  probe("reciprocal", {5}, [](Tape<T>& t, V x) {
    return t.sum_all(t.reciprocal(x));
  }, 0.2, 3.0);
  probe("sqrt_shift", {5}, [](Tape<T>& t, V x) {
    return t.sum_all(t.sqrt_shift(t.mul(x, x), T(1e-8)));
  }, 1.0, 2.0);
  probe("reshape_slice_pad", {6, 2}, [](Tape<T>& t, V x) {
    auto s = t.slice_rows(x, 1, 4);
    return t.sum_all(t.mul(s, t.pad_rows(t.slice_rows(s, 0, 2), 1, 3)));
  });
  probe("concat_rows", {4, 3}, [](Tape<T>& t, V x) {
    V parts[] = {x, t.mul_scalar(x, T(2))};
    auto c = t.concat_rows(std::span<const V>(parts));
    return t.sum_all(t.mul(c, c));
  });
  probe("transpose_matmul", {3, 4}, [](Tape<T>& t, V x) {
    return t.sum_all(t.matmul(x, t.transpose2(x)));
  });
  probe("rot90", {2, 1, 4, 4}, [](Tape<T>& t, V x) {
    return t.sum_all(t.mul(t.rot90(x, 1), t.rot90(x, 3)));
  });
  probe("rotation_stack", {3, 1, 4, 4}, [](Tape<T>& t, V x) {
    auto r = t.rotation_stack(x, 2);
    return t.sum_all(t.mul(r, r));
  });
  probe("kernel_flip", {2, 3, 3, 3}, [](Tape<T>& t, V x) {
    auto f = t.kernel_flip_transpose(x);
    return t.sum_all(t.mul(f, f));
  });
  probe("conv2d_3x3", {2, 2, 5, 5}, [](Tape<T>& t, V x) {
    auto k = t.constant(Tensor<T>({2, 2, 3, 3},
                                  std::vector<T>(36, T(0.25))));
    auto y = t.conv2d(x, k);
    return t.sum_all(t.mul(y, y));
  });
  probe("conv2d_kernel_grad", {2, 2, 3, 3}, [](Tape<T>& t, V k) {
    Tensor<T> img({1, 2, 4, 4});
    for (int64_t i = 0; i < img.numel(); ++i)
      img.v[static_cast<size_t>(i)] = T(0.1) * static_cast<T>(i % 7) - T(0.3);
    auto y = t.conv2d(t.constant(img), k);
    return t.sum_all(t.mul(y, y));
  });
  probe("conv2d_1x1", {2, 3, 4, 4}, [](Tape<T>& t, V x) {
    auto k = t.constant(Tensor<T>({2, 3, 1, 1},
                                  std::vector<T>{T(1), T(-1), T(0.5),
                                                 T(0.2), T(0.3), T(-0.7)}));
    return t.sum_all(t.mul(t.conv2d(x, k), t.conv2d(x, k)));
  });
  probe("conv2d_bias", {2, 2, 4, 4}, [](Tape<T>& t, V x) {
    auto k = t.constant(Tensor<T>({2, 2, 3, 3}, std::vector<T>(36, T(0.1))));
    auto b = t.constant(Tensor<T>({2}, std::vector<T>{T(0.2), T(-0.1)}));
    auto y = t.conv2d_bias(x, k, b);
    return t.sum_all(t.mul(y, y));
  });
  probe("conv2d_wgrad_op", {1, 2, 4, 4}, [](Tape<T>& t, V x) {
    Tensor<T> gy({1, 3, 4, 4});
    for (int64_t i = 0; i < gy.numel(); ++i)
      gy.v[static_cast<size_t>(i)] = T(0.05) * static_cast<T>((i * 13) % 11) - T(0.2);
    auto gk = t.conv2d_wgrad(x, t.constant(gy), 3, 3);
    return t.sum_all(t.mul(gk, gk));
  });
  probe("chan_bias", {2, 3, 4, 4}, [](Tape<T>& t, V x) {
    auto b = t.constant(Tensor<T>({3}, std::vector<T>{T(1), T(-2), T(0.5)}));
    auto y = t.add_chan_bias(x, b);
    return t.sum_all(t.mul(y, y));
  });
  probe("chan_affine", {2, 2, 3, 3}, [](Tape<T>& t, V x) {
    auto g = t.constant(Tensor<T>({2}, std::vector<T>{T(1.5), T(-0.5)}));
    auto b = t.constant(Tensor<T>({2}, std::vector<T>{T(0.2), T(0.8)}));
    auto y = t.chan_affine(x, g, b);
    return t.sum_all(t.mul(y, y));
  });
  probe("scale_chan_reduce", {2, 3, 2, 2}, [](Tape<T>& t, V x) {
    auto s = t.reduce_chan(x);
    return t.sum_all(t.mul(s, s));
  });
  probe("broadcast_chan", {3}, [](Tape<T>& t, V x) {
    auto b = t.broadcast_chan(x, {2, 3, 2, 2});
    return t.sum_all(t.mul(b, b));
  });
  probe("nc_affine", {2, 3, 2, 2}, [](Tape<T>& t, V x) {
    auto s = t.reduce_hw(x);
    auto y = t.add_nc(t.scale_nc(x, s), s);
    return t.sum_all(t.mul(y, y));
  });
  probe("avgpool2", {2, 2, 4, 4}, [](Tape<T>& t, V x) {
    auto y = t.avgpool2(x);
    return t.sum_all(t.mul(y, y));
  });
  probe("upsample2", {2, 2, 3, 3}, [](Tape<T>& t, V x) {
    auto y = t.upsample2(x);
    return t.sum_all(t.mul(y, y));
  });
  probe("reduce_sample", {3, 8}, [](Tape<T>& t, V x) {
    auto y = t.reduce_sample(t.mul(x, x));
    return t.sum_all(t.sqrt_shift(y, T(1e-10)));
  });
  probe("gather_scatter", {4, 3}, [](Tape<T>& t, V x) {
    auto g = t.gather_rows(x, {2, 0, 2, 1});
    return t.sum_all(t.mul(g, g));
  });
  probe("bn_norm", {4, 3, 2, 2}, [](Tape<T>& t, V x) {
    auto y = t.bn_norm(x);
    return t.sum_all(t.mul(y, t.add_scalar(y, T(0.3))));
  });
  probe("bn_norm_2d", {8, 3}, [](Tape<T>& t, V x) {
    auto y = t.bn_norm(x);
    return t.mean_all(t.mul(y, y));
  });
  probe("softmax_xent", {5, 4}, [](Tape<T>& t, V x) {
    return t.softmax_xent_mean(x, {0, 3, 1, 2, 0});
  });
  probe("bce_logits", {6}, [](Tape<T>& t, V x) {
    return t.bce_logits_mean(x, {1, 0, 1, 1, 0, 0});
  });
  probe("mean_all", {7}, [](Tape<T>& t, V x) {
    return t.mean_all(t.mul(x, t.mul(x, x)));
  });
  return ps;
}

// Runs grad_check for one probe with inputs drawn from the given seed.
template <class T>
double run_probe(const OpProbe<T>& p, uint64_t seed, T eps) {
  DetRng rng(seed, Stream::generic, 77);
  Tensor<T> x(p.input_shape);
  for (auto& e : x.v)
    e = static_cast<T>(rng.normal() * p.scale + p.offset);
  return grad_check<T>(p.fn, x, eps);
}

}  // namespace ssgan::testing
