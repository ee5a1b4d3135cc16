#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "ssgan/common.hpp"
#include "ssgan/gemm.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// Reverse-mode autodiff over a dynamically recorded op graph. Values are
// computed eagerly at node creation. Backward passes are emitted as new tape
// ops, so gradients are themselves differentiable; the gradient penalty
// relies on this for the ops in the discriminator trunk (conv, matmul, relu,
// pooling, reshape, reductions). Ops whose backward captures forward values
// as constants (tanh, batch-norm, fused cross-entropy) are first-order only
// and are never on a twice-differentiated path.
template <class T>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() { nodes_.reserve(kReserve); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Tensor<T>& value(Var x) const { return nodes_[x.id].value; }
  size_t size() const { return nodes_.size(); }

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var constant_scalar(T x) { return constant(Tensor<T>::scalar(x)); }

  // ---- pointwise ----

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    Tensor<T> out = Tensor<T>::uninit(av.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av.v[i] + bv.v[i];
    return push(std::move(out), needs_grad(a) || needs_grad(b),
                [a, b](Tape& t, Var, Var g) {
                  t.accum(a, g);
                  t.accum(b, g);
                });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    Tensor<T> out = Tensor<T>::uninit(av.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av.v[i] - bv.v[i];
    return push(std::move(out), needs_grad(a) || needs_grad(b),
                [a, b](Tape& t, Var, Var g) {
                  t.accum(a, g);
                  t.accum(b, t.neg(g));
                });
  }

  Var neg(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = -xv.v[i];
    return push(std::move(out), needs_grad(x),
                [x](Tape& t, Var, Var g) { t.accum(x, t.neg(g)); });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    Tensor<T> out = Tensor<T>::uninit(av.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av.v[i] * bv.v[i];
    return push(std::move(out), needs_grad(a) || needs_grad(b),
                [a, b](Tape& t, Var, Var g) {
                  t.accum(a, t.mul(g, b));
                  t.accum(b, t.mul(g, a));
                });
  }

  Var add_scalar(Var x, T c) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = xv.v[i] + c;
    return push(std::move(out), needs_grad(x),
                [x](Tape& t, Var, Var g) { t.accum(x, g); });
  }

  Var mul_scalar(Var x, T c) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = xv.v[i] * c;
    return push(std::move(out), needs_grad(x),
                [x, c](Tape& t, Var, Var g) { t.accum(x, t.mul_scalar(g, c)); });
  }

  // out = x * s, with s a {1}-shaped var broadcast over x.
  Var mul_scalarvar(Var x, Var s) {
    require(value(s).numel() == 1, ErrorCode::shape_mismatch, "mul_scalarvar");
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    T sv = value(s).v[0];
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = xv.v[i] * sv;
    return push(std::move(out), needs_grad(x) || needs_grad(s),
                [x, s](Tape& t, Var, Var g) {
                  t.accum(x, t.mul_scalarvar(g, s));
                  t.accum(s, t.sum_all(t.mul(g, x)));
                });
  }

  Var relu(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    Tensor<T> mask = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) {
      bool pos = xv.v[i] > T(0);
      out.v[i] = pos ? xv.v[i] : T(0);
      mask.v[i] = pos ? T(1) : T(0);
    }
    Var m = constant(std::move(mask));
    return push(std::move(out), needs_grad(x),
                [x, m](Tape& t, Var, Var g) { t.accum(x, t.mul(g, m)); });
  }

  Var tanh_op(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::tanh(xv.v[i]);
    Tensor<T> d = Tensor<T>::uninit(out.shape);
    for (size_t i = 0; i < out.v.size(); ++i) d.v[i] = T(1) - out.v[i] * out.v[i];
    Var dc = constant(std::move(d));
    return push(std::move(out), needs_grad(x),
                [x, dc](Tape& t, Var, Var g) { t.accum(x, t.mul(g, dc)); });
  }

  Var reciprocal(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = T(1) / xv.v[i];
    return push(std::move(out), needs_grad(x), [x](Tape& t, Var self, Var g) {
      t.accum(x, t.neg(t.mul(g, t.mul(self, self))));
    });
  }

  Var sqrt_shift(Var x, T eps) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::sqrt(xv.v[i] + eps);
    return push(std::move(out), needs_grad(x), [x](Tape& t, Var self, Var g) {
      t.accum(x, t.mul(g, t.mul_scalar(t.reciprocal(self), T(0.5))));
    });
  }

  // ---- structural ----

  Var reshape(Var x, Shape s) {
    Shape orig = value(x).shape;
    Tensor<T> out = value(x).reshaped(std::move(s));
    return push(std::move(out), needs_grad(x), [x, orig](Tape& t, Var, Var g) {
      t.accum(x, t.reshape(g, orig));
    });
  }

  Var slice_rows(Var x, int begin, int end) {
    const Tensor<T>& xv = value(x);
    require(begin >= 0 && end <= xv.dim(0) && begin < end,
            ErrorCode::invalid_argument, "slice_rows range");
    int64_t row = xv.numel() / xv.dim(0);
    Shape s = xv.shape;
    s[0] = end - begin;
    Tensor<T> out(s);
    std::copy(xv.v.begin() + begin * row, xv.v.begin() + end * row, out.v.begin());
    int total = xv.dim(0);
    return push(std::move(out), needs_grad(x),
                [x, begin, total](Tape& t, Var, Var g) {
                  t.accum(x, t.pad_rows(g, begin, total));
                });
  }

  // Zero-pad along axis 0 so that input rows land at [begin, begin+n).
  Var pad_rows(Var x, int begin, int total) {
    const Tensor<T>& xv = value(x);
    int64_t row = xv.numel() / xv.dim(0);
    Shape s = xv.shape;
    s[0] = total;
    Tensor<T> out(s);
    std::copy(xv.v.begin(), xv.v.end(), out.v.begin() + begin * row);
    int n = xv.dim(0);
    return push(std::move(out), needs_grad(x),
                [x, begin, n](Tape& t, Var, Var g) {
                  t.accum(x, t.slice_rows(g, begin, begin + n));
                });
  }

  Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::invalid_argument, "concat_rows empty");
    Shape s = value(parts[0]).shape;
    int total = 0;
    bool rg = false;
    for (Var p : parts) {
      Shape ps = value(p).shape;
      require(Shape(ps.begin() + 1, ps.end()) == Shape(s.begin() + 1, s.end()),
              ErrorCode::shape_mismatch, "concat_rows trailing dims");
      total += ps[0];
      rg = rg || needs_grad(p);
    }
    s[0] = total;
    Tensor<T> out(s);
    int64_t off = 0;
    std::vector<std::pair<Var, std::pair<int, int>>> ranges;
    int r = 0;
    for (Var p : parts) {
      const auto& pv = value(p).v;
      std::copy(pv.begin(), pv.end(), out.v.begin() + off);
      off += static_cast<int64_t>(pv.size());
      int nr = value(p).dim(0);
      ranges.push_back({p, {r, r + nr}});
      r += nr;
    }
    return push(std::move(out), rg, [ranges](Tape& t, Var, Var g) {
      for (auto& [p, rr] : ranges) t.accum(p, t.slice_rows(g, rr.first, rr.second));
    });
  }

  Var transpose2(Var x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 2, ErrorCode::shape_mismatch, "transpose2 rank");
    int m = xv.dim(0), n = xv.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out(j, i) = xv(i, j);
    return push(std::move(out), needs_grad(x),
                [x](Tape& t, Var, Var g) { t.accum(x, t.transpose2(g)); });
  }

  // Counter-clockwise rotation by k*90 degrees of NCHW images (H == W).
  Var rot90(Var x, int k) {
    Tensor<T> out = rot90_tensor(value(x), k);
    int kinv = (4 - (k & 3)) & 3;
    return push(std::move(out), needs_grad(x),
                [x, kinv](Tape& t, Var, Var g) { t.accum(x, t.rot90(g, kinv)); });
  }

  static Tensor<T> rot90_tensor(const Tensor<T>& x, int k) {
    require(x.rank() == 4, ErrorCode::shape_mismatch, "rot90 rank");
    require(x.dim(2) == x.dim(3), ErrorCode::invalid_argument,
            "rot90 requires square images");
    k &= 3;
    if (k == 0) return x;
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape);
    int64_t hw = static_cast<int64_t>(H) * W;
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
      const T* src = x.data() + nc * hw;
      T* dst = out.data() + nc * hw;
      // counter-clockwise: one step maps out[i][j] = in[j][W-1-i]
      switch (k) {
        case 1:
          for (int i = 0; i < H; ++i) {
            const T* col = src + (W - 1 - i);
            for (int j = 0; j < W; ++j) *dst++ = col[static_cast<int64_t>(j) * W];
          }
          break;
        case 2:
          for (int64_t i = hw - 1; i >= 0; --i) *dst++ = src[i];
          break;
        default:
          for (int i = 0; i < H; ++i) {
            const T* col = src + static_cast<int64_t>(W - 1) * W + i;
            for (int j = 0; j < W; ++j) *dst++ = col[-static_cast<int64_t>(j) * W];
          }
          break;
      }
    }
    return out;
  }

  // First n_base images expanded into all four rotations, image-major then
  // k = 0..3. One fused op instead of per-image slice/rotate/concat chains.
  Var rotation_stack(Var x, int n_base) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4 && xv.dim(2) == xv.dim(3), ErrorCode::shape_mismatch,
            "rotation_stack needs square NCHW");
    require(n_base >= 1 && n_base <= xv.dim(0), ErrorCode::invalid_argument,
            "rotation_stack: n_base exceeds batch");
    int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int64_t img = static_cast<int64_t>(C) * H * W;
    Tensor<T> out({4 * n_base, C, H, W});
    Tensor<T> one({1, C, H, W});
    for (int i = 0; i < n_base; ++i) {
      std::copy(xv.v.begin() + i * img, xv.v.begin() + (i + 1) * img,
                one.v.begin());
      for (int k = 0; k < 4; ++k) {
        Tensor<T> rot = rot90_tensor(one, k);
        std::copy(rot.v.begin(), rot.v.end(),
                  out.v.begin() + static_cast<int64_t>(4 * i + k) * img);
      }
    }
    int total = xv.dim(0);
    return push(std::move(out), needs_grad(x), [x, total](Tape& t, Var, Var g) {
      t.accum(x, t.rotation_unstack(g, total));
    });
  }

  // Adjoint of rotation_stack: inverse-rotate each of the 4*n_base rows and
  // accumulate onto the first n_base of `total` rows.
  Var rotation_unstack(Var g, int total) {
    const Tensor<T>& gv = value(g);
    require(gv.rank() == 4 && gv.dim(0) % 4 == 0, ErrorCode::shape_mismatch,
            "rotation_unstack shape");
    int n_base = gv.dim(0) / 4;
    int C = gv.dim(1), H = gv.dim(2), W = gv.dim(3);
    int64_t img = static_cast<int64_t>(C) * H * W;
    Tensor<T> out({total, C, H, W});
    Tensor<T> one({1, C, H, W});
    for (int i = 0; i < n_base; ++i)
      for (int k = 0; k < 4; ++k) {
        std::copy(gv.v.begin() + static_cast<int64_t>(4 * i + k) * img,
                  gv.v.begin() + static_cast<int64_t>(4 * i + k + 1) * img,
                  one.v.begin());
        Tensor<T> rot = rot90_tensor(one, (4 - k) & 3);
        for (int64_t j = 0; j < img; ++j) out.v[i * img + j] += rot.v[j];
      }
    int nb = n_base;
    return push(std::move(out), needs_grad(g), [g, nb](Tape& t, Var, Var gg) {
      t.accum(g, t.rotation_stack(gg, nb));
    });
  }

  // (Cout,Cin,kh,kw) -> (Cin,Cout,kh,kw) with both spatial axes flipped.
  // Self-inverse permutation; conv2d's input gradient is a conv with this.
  Var kernel_flip_transpose(Var k) {
    const Tensor<T>& kv = value(k);
    require(kv.rank() == 4, ErrorCode::shape_mismatch, "kernel_flip rank");
    int co = kv.dim(0), ci = kv.dim(1), kh = kv.dim(2), kw = kv.dim(3);
    Tensor<T> out({ci, co, kh, kw});
    for (int a = 0; a < co; ++a)
      for (int b = 0; b < ci; ++b)
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c)
            out(b, a, kh - 1 - r, kw - 1 - c) = kv(a, b, r, c);
    return push(std::move(out), needs_grad(k), [k](Tape& t, Var, Var g) {
      t.accum(k, t.kernel_flip_transpose(g));
    });
  }

  // ---- broadcast / reduce ----
  // "Channel" is axis 1 for rank-4 tensors and the column for rank-2.

  Var add_chan_bias(Var x, Var b) {
    Tensor<T> out = value(x);
    apply_chan(out, value(b), [](T& e, T c) { e += c; });
    return push(std::move(out), needs_grad(x) || needs_grad(b),
                [x, b](Tape& t, Var, Var g) {
                  t.accum(x, g);
                  t.accum(b, t.reduce_chan(g));
                });
  }

  Var scale_chan(Var x, Var s) {
    Tensor<T> out = value(x);
    apply_chan(out, value(s), [](T& e, T c) { e *= c; });
    return push(std::move(out), needs_grad(x) || needs_grad(s),
                [x, s](Tape& t, Var, Var g) {
                  t.accum(x, t.scale_chan(g, s));
                  t.accum(s, t.reduce_chan(t.mul(g, x)));
                });
  }

  // out = x * gamma[c] + beta[c] in one pass.
  Var chan_affine(Var x, Var gamma, Var beta) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& gv = value(gamma);
    const Tensor<T>& bv = value(beta);
    int C = chan_dim(xv);
    require(gv.numel() == C && bv.numel() == C, ErrorCode::shape_mismatch,
            "chan_affine operand size");
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    int64_t hw = xv.rank() == 2 ? 1 : static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    const T* p = xv.data();
    T* q = out.data();
    for (int n = 0; n < xv.dim(0); ++n)
      for (int c = 0; c < C; ++c) {
        T gc = gv.v[static_cast<size_t>(c)], bc = bv.v[static_cast<size_t>(c)];
        for (int64_t i = 0; i < hw; ++i) q[i] = p[i] * gc + bc;
        p += hw;
        q += hw;
      }
    return push(std::move(out),
                needs_grad(x) || needs_grad(gamma) || needs_grad(beta),
                [x, gamma, beta](Tape& t, Var, Var g) {
                  t.accum(x, t.scale_chan(g, gamma));
                  t.accum(gamma, t.reduce_chan(t.mul(g, x)));
                  t.accum(beta, t.reduce_chan(g));
                });
  }

  Var reduce_chan(Var x) {
    const Tensor<T>& xv = value(x);
    int C = chan_dim(xv);
    Tensor<T> out({C});
    if (xv.rank() == 2) {
      const T* p = xv.data();
      for (int n = 0; n < xv.dim(0); ++n)
        for (int j = 0; j < C; ++j) out.v[static_cast<size_t>(j)] += *p++;
    } else {
      int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
      const T* p = xv.data();
      for (int n = 0; n < xv.dim(0); ++n)
        for (int j = 0; j < C; ++j) {
          T s = 0;
          for (int64_t i = 0; i < hw; ++i) s += *p++;
          out.v[static_cast<size_t>(j)] += s;
        }
    }
    Shape xs = xv.shape;
    return push(std::move(out), needs_grad(x), [x, xs](Tape& t, Var, Var g) {
      t.accum(x, t.broadcast_chan(g, xs));
    });
  }

  Var broadcast_chan(Var c, Shape target) {
    const Tensor<T>& cv = value(c);
    require(chan_dim_shape(target) == cv.numel(), ErrorCode::shape_mismatch,
            "broadcast_chan");
    Tensor<T> out(target);
    apply_chan(out, cv, [](T& e, T b) { e = b; });
    return push(std::move(out), needs_grad(c),
                [c](Tape& t, Var, Var g) { t.accum(c, t.reduce_chan(g)); });
  }

  // Per-sample-per-channel affine, for self-modulated batch norm.
  Var scale_nc(Var x, Var s) { return nc_op(x, s, true); }
  Var add_nc(Var x, Var b) { return nc_op(x, b, false); }

  Var reduce_hw(Var x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4, ErrorCode::shape_mismatch, "reduce_hw rank");
    int N = xv.dim(0), C = xv.dim(1);
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<T> out({N, C});
    const T* p = xv.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T s = 0;
        for (int64_t i = 0; i < hw; ++i) s += *p++;
        out(n, c) = s;
      }
    int H = xv.dim(2), W = xv.dim(3);
    return push(std::move(out), needs_grad(x), [x, H, W](Tape& t, Var, Var g) {
      t.accum(x, t.broadcast_hw(g, H, W));
    });
  }

  Var broadcast_hw(Var nc, int H, int W) {
    const Tensor<T>& v = value(nc);
    require(v.rank() == 2, ErrorCode::shape_mismatch, "broadcast_hw rank");
    Tensor<T> out({v.dim(0), v.dim(1), H, W});
    T* p = out.data();
    for (int n = 0; n < v.dim(0); ++n)
      for (int c = 0; c < v.dim(1); ++c) {
        T e = v(n, c);
        for (int i = 0; i < H * W; ++i) *p++ = e;
      }
    return push(std::move(out), needs_grad(nc),
                [nc](Tape& t, Var, Var g) { t.accum(nc, t.reduce_hw(g)); });
  }

  Var sum_all(Var x) {
    T s = 0;
    for (T e : value(x).v) s += e;
    Shape xs = value(x).shape;
    return push(Tensor<T>::scalar(s), needs_grad(x), [x, xs](Tape& t, Var, Var g) {
      t.accum(x, t.broadcast_full(g, xs));
    });
  }

  Var broadcast_full(Var s, Shape target) {
    require(value(s).numel() == 1, ErrorCode::shape_mismatch, "broadcast_full");
    Tensor<T> out = Tensor<T>::full(target, value(s).v[0]);
    return push(std::move(out), needs_grad(s),
                [s](Tape& t, Var, Var g) { t.accum(s, t.sum_all(g)); });
  }

  Var mean_all(Var x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(value(x).numel()));
  }

  // Sum over all non-batch axes -> (N).
  Var reduce_sample(Var x) {
    const Tensor<T>& xv = value(x);
    int N = xv.dim(0);
    int64_t row = xv.numel() / N;
    Tensor<T> out({N});
    const T* p = xv.data();
    for (int n = 0; n < N; ++n) {
      T s = 0;
      for (int64_t i = 0; i < row; ++i) s += *p++;
      out.v[n] = s;
    }
    Shape xs = xv.shape;
    return push(std::move(out), needs_grad(x), [x, xs](Tape& t, Var, Var g) {
      t.accum(x, t.broadcast_sample(g, xs));
    });
  }

  Var broadcast_sample(Var n, Shape target) {
    const Tensor<T>& v = value(n);
    require(v.rank() == 1 && v.dim(0) == target[0], ErrorCode::shape_mismatch,
            "broadcast_sample");
    Tensor<T> out(target);
    int64_t row = out.numel() / target[0];
    T* p = out.data();
    for (int i = 0; i < target[0]; ++i)
      for (int64_t j = 0; j < row; ++j) *p++ = v.v[i];
    return push(std::move(out), needs_grad(n),
                [n](Tape& t, Var, Var g) { t.accum(n, t.reduce_sample(g)); });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0)))
      fail(ErrorCode::shape_mismatch,
           "matmul " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out = Tensor<T>::uninit({m, n});
    mm_nn(av.data(), bv.data(), out.data(), m, k, n);
    return push(std::move(out), needs_grad(a) || needs_grad(b),
                [a, b](Tape& t, Var, Var g) {
                  t.accum(a, t.matmul(g, t.transpose2(b)));
                  t.accum(b, t.matmul(t.transpose2(a), g));
                });
  }

  // Stride-1 "same" convolution; odd kernels only, pad = k/2.
  Var conv2d(Var x, Var k) {
    Tensor<T> out = conv2d_forward(value(x), value(k));
    int kh = value(k).dim(2), kw = value(k).dim(3);
    return push(std::move(out), needs_grad(x) || needs_grad(k),
                [x, k, kh, kw](Tape& t, Var, Var g) {
                  t.accum(x, t.conv2d(g, t.kernel_flip_transpose(k)));
                  t.accum(k, t.conv2d_wgrad(x, g, kh, kw));
                });
  }

  // Convolution with channel bias folded in; one output tensor instead of
  // two on the busiest path.
  Var conv2d_bias(Var x, Var k, Var b) {
    Tensor<T> out = conv2d_forward(value(x), value(k));
    const Tensor<T>& bv = value(b);
    require(bv.numel() == out.dim(1), ErrorCode::shape_mismatch,
            "conv2d_bias: bias size");
    int64_t hw = static_cast<int64_t>(out.dim(2)) * out.dim(3);
    T* p = out.data();
    for (int n = 0; n < out.dim(0); ++n)
      for (int c = 0; c < out.dim(1); ++c) {
        T e = bv.v[static_cast<size_t>(c)];
        for (int64_t i = 0; i < hw; ++i) p[i] += e;
        p += hw;
      }
    int kh = value(k).dim(2), kw = value(k).dim(3);
    return push(std::move(out), needs_grad(x) || needs_grad(k) || needs_grad(b),
                [x, k, b, kh, kw](Tape& t, Var, Var g) {
                  t.accum(x, t.conv2d(g, t.kernel_flip_transpose(k)));
                  t.accum(k, t.conv2d_wgrad(x, g, kh, kw));
                  t.accum(b, t.reduce_chan(g));
                });
  }

  // Kernel gradient of conv2d as a first-class bilinear op:
  // out[co,ci,r,c] = sum_n,h,w gy[n,co,h,w] * x[n,ci,h+r-p,w+c-p].
  Var conv2d_wgrad(Var x, Var gy, int kh, int kw) {
    Tensor<T> out = conv2d_wgrad_forward(value(x), value(gy), kh, kw);
    return push(std::move(out), needs_grad(x) || needs_grad(gy),
                [x, gy](Tape& t, Var, Var g) {
                  t.accum(x, t.conv2d(gy, t.kernel_flip_transpose(g)));
                  t.accum(gy, t.conv2d(x, g));
                });
  }

  Var gather_rows(Var table, std::vector<int> idx) {
    const Tensor<T>& tv = value(table);
    require(tv.rank() == 2, ErrorCode::shape_mismatch, "gather_rows rank");
    int K = tv.dim(0), D = tv.dim(1);
    for (int i : idx)
      require(i >= 0 && i < K, ErrorCode::invalid_argument,
              "gather_rows index out of range");
    Tensor<T> out({static_cast<int>(idx.size()), D});
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(tv.v.begin() + static_cast<int64_t>(idx[r]) * D,
                tv.v.begin() + static_cast<int64_t>(idx[r] + 1) * D,
                out.v.begin() + static_cast<int64_t>(r) * D);
    return push(std::move(out), needs_grad(table),
                [table, idx, K](Tape& t, Var, Var g) {
                  t.accum(table, t.scatter_rows(g, idx, K));
                });
  }

  Var scatter_rows(Var x, std::vector<int> idx, int K) {
    const Tensor<T>& xv = value(x);
    int D = xv.dim(1);
    Tensor<T> out({K, D});
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < D; ++j) out(idx[r], j) += xv(static_cast<int>(r), j);
    return push(std::move(out), needs_grad(x), [x, idx](Tape& t, Var, Var g) {
      t.accum(x, t.gather_rows(g, idx));
    });
  }

  // ---- pooling / resampling ----

  Var avgpool2(Var x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4 && xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0,
            ErrorCode::shape_mismatch, "avgpool2 needs even spatial dims");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out = Tensor<T>::uninit({N, C, H / 2, W / 2});
    T* dst = out.data();
    for (int nc = 0; nc < N * C; ++nc) {
      const T* plane = xv.data() + static_cast<int64_t>(nc) * H * W;
      for (int i = 0; i < H / 2; ++i) {
        const T* r0 = plane + static_cast<int64_t>(2 * i) * W;
        const T* r1 = r0 + W;
        for (int j = 0; j < W / 2; ++j)
          *dst++ = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * T(0.25);
      }
    }
    return push(std::move(out), needs_grad(x), [x](Tape& t, Var, Var g) {
      t.accum(x, t.mul_scalar(t.upsample2(g), T(0.25)));
    });
  }

  Var upsample2(Var x) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4, ErrorCode::shape_mismatch, "upsample2 rank");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out = Tensor<T>::uninit({N, C, H * 2, W * 2});
    const T* src = xv.data();
    for (int nc = 0; nc < N * C; ++nc) {
      T* plane = out.data() + static_cast<int64_t>(nc) * 4 * H * W;
      for (int i = 0; i < H; ++i) {
        T* d0 = plane + static_cast<int64_t>(2 * i) * 2 * W;
        T* d1 = d0 + 2 * W;
        for (int j = 0; j < W; ++j) {
          T e = *src++;
          d0[2 * j] = e;
          d0[2 * j + 1] = e;
          d1[2 * j] = e;
          d1[2 * j + 1] = e;
        }
      }
    }
    return push(std::move(out), needs_grad(x), [x](Tape& t, Var, Var g) {
      t.accum(x, t.mul_scalar(t.avgpool2(g), T(4)));
    });
  }

  // ---- normalization / losses ----

  // Batch normalization without affine parameters; per-channel statistics
  // over (N,H,W) for rank-4 and over N for rank-2. First-order backward.
  Var bn_norm(Var x, T eps = T(1e-5)) {
    const Tensor<T>& xv = value(x);
    int C = chan_dim(xv);
    int64_t m = xv.numel() / C;
    int64_t hw = xv.rank() == 2 ? 1 : static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    std::vector<double> sum(static_cast<size_t>(C), 0.0),
        sumsq(static_cast<size_t>(C), 0.0);
    {
      const T* p = xv.data();
      for (int n = 0; n < xv.dim(0); ++n)
        for (int c = 0; c < C; ++c) {
          double s = 0, s2 = 0;
          for (int64_t i = 0; i < hw; ++i) {
            double e = p[i];
            s += e;
            s2 += e * e;
          }
          sum[static_cast<size_t>(c)] += s;
          sumsq[static_cast<size_t>(c)] += s2;
          p += hw;
        }
    }
    Tensor<T> mean = Tensor<T>::uninit({C});
    Tensor<T> invstd = Tensor<T>::uninit({C});
    for (int c = 0; c < C; ++c) {
      double mu = sum[static_cast<size_t>(c)] / static_cast<double>(m);
      double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(m) - mu * mu;
      if (var < 0) var = 0;
      mean.v[static_cast<size_t>(c)] = static_cast<T>(mu);
      invstd.v[static_cast<size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    }
    Tensor<T> out = Tensor<T>::uninit(xv.shape);
    {
      const T* p = xv.data();
      T* q = out.data();
      for (int n = 0; n < xv.dim(0); ++n)
        for (int c = 0; c < C; ++c) {
          T mu = mean.v[static_cast<size_t>(c)];
          T is = invstd.v[static_cast<size_t>(c)];
          for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is;
          p += hw;
          q += hw;
        }
    }
    Var xhat = constant(out);
    Var istd = constant(std::move(invstd));
    T minv = T(1) / static_cast<T>(m);
    return push(std::move(out), needs_grad(x),
                [x, xhat, istd, minv](Tape& t, Var, Var g) {
                  // g_x = invstd * (g - mean(g) - xhat * mean(g*xhat))
                  Shape xs = t.value(x).shape;
                  Var mg = t.broadcast_chan(t.mul_scalar(t.reduce_chan(g), minv), xs);
                  Var gx = t.mul(g, xhat);
                  Var mgx = t.broadcast_chan(t.mul_scalar(t.reduce_chan(gx), minv), xs);
                  Var r = t.sub(t.sub(g, mg), t.mul(xhat, mgx));
                  t.accum(x, t.scale_chan(r, istd));
                });
  }

  // Mean softmax cross-entropy over rows; labels are class indices.
  // First-order backward: (softmax - onehot)/N.
  Var softmax_xent_mean(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = value(logits);
    require(lv.rank() == 2, ErrorCode::shape_mismatch, "softmax_xent rank");
    int N = lv.dim(0), C = lv.dim(1);
    require(static_cast<int>(labels.size()) == N, ErrorCode::shape_mismatch,
            "softmax_xent labels length");
    for (int y : labels)
      require(y >= 0 && y < C, ErrorCode::invalid_argument,
              "softmax_xent label out of range");
    Tensor<T> gmat({N, C});
    double loss = 0;
    for (int i = 0; i < N; ++i) {
      T mx = lv(i, 0);
      for (int j = 1; j < C; ++j) mx = std::max(mx, lv(i, j));
      double z = 0;
      for (int j = 0; j < C; ++j) z += std::exp(static_cast<double>(lv(i, j) - mx));
      double logz = std::log(z);
      loss += -(static_cast<double>(lv(i, labels[i]) - mx) - logz);
      for (int j = 0; j < C; ++j) {
        double p = std::exp(static_cast<double>(lv(i, j) - mx)) / z;
        gmat(i, j) = static_cast<T>((p - (j == labels[i] ? 1.0 : 0.0)) / N);
      }
    }
    Var gc = constant(std::move(gmat));
    return push(Tensor<T>::scalar(static_cast<T>(loss / N)), needs_grad(logits),
                [logits, gc](Tape& t, Var, Var g) {
                  t.accum(logits, t.mul_scalarvar(gc, g));
                });
  }

  // Mean binary cross-entropy with logits; labels in {0,1}.
  Var bce_logits_mean(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = value(logits);
    int N = static_cast<int>(lv.numel());
    require(static_cast<int>(labels.size()) == N, ErrorCode::shape_mismatch,
            "bce labels length");
    Tensor<T> gmat(lv.shape);
    double loss = 0;
    for (int i = 0; i < N; ++i) {
      double x = static_cast<double>(lv.v[i]);
      double y = labels[i];
      loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
      double s = 1.0 / (1.0 + std::exp(-x));
      gmat.v[i] = static_cast<T>((s - y) / N);
    }
    Var gc = constant(std::move(gmat));
    return push(Tensor<T>::scalar(static_cast<T>(loss / N)), needs_grad(logits),
                [logits, gc](Tape& t, Var, Var g) {
                  t.accum(logits, t.mul_scalarvar(gc, g));
                });
  }

  // ---- backward ----

  // Adjoints of `wrt` for a scalar loss, themselves recorded on the tape.
  // Entries of the result may be invalid when no path exists.
  std::vector<Var> grad(Var loss, std::span<const Var> wrt) {
    require(value(loss).numel() == 1, ErrorCode::invalid_argument,
            "grad: loss must be scalar");
    int top = loss.id;
    adjoint_.assign(static_cast<size_t>(top) + 1, Var{});
    adjoint_[top] = constant(Tensor<T>::full(value(loss).shape, T(1)));
    for (int i = top; i >= 0; --i) {
      if (!adjoint_[i].valid()) continue;
      if (!nodes_[i].requires_grad) continue;
      if (nodes_[i].backward) nodes_[i].backward(*this, Var{i}, adjoint_[i]);
    }
    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt)
      out.push_back(w.id <= top ? adjoint_[w.id] : Var{});
    adjoint_.clear();
    return out;
  }

  // Gradient values for leaves; zero tensor when no path exists.
  std::vector<Tensor<T>> grad_values(Var loss, std::span<const Var> wrt) {
    auto gs = grad(loss, wrt);
    std::vector<Tensor<T>> out;
    out.reserve(gs.size());
    for (size_t i = 0; i < gs.size(); ++i)
      out.push_back(gs[i].valid() ? value(gs[i])
                                  : Tensor<T>::zeros(value(wrt[i]).shape));
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::function<void(Tape&, Var, Var)> backward;
  };

  static constexpr size_t kReserve = 16384;
  std::vector<Node> nodes_;
  std::vector<Var> adjoint_;

  bool needs_grad(Var x) const { return nodes_[x.id].requires_grad; }

  Var push(Tensor<T> value, bool requires_grad,
           std::function<void(Tape&, Var, Var)> backward) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void accum(Var target, Var contrib) {
    if (!nodes_[target.id].requires_grad) return;
    if (target.id >= static_cast<int>(adjoint_.size())) return;
    Var& a = adjoint_[target.id];
    a = a.valid() ? add(a, contrib) : contrib;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      fail(ErrorCode::shape_mismatch,
           std::string(op) + " shapes " + shape_str(value(a).shape) + " vs " +
               shape_str(value(b).shape));
  }

  static int chan_dim(const Tensor<T>& x) {
    require(x.rank() == 2 || x.rank() == 4, ErrorCode::shape_mismatch,
            "channel ops need rank 2 or 4");
    return x.dim(1);
  }
  static int64_t chan_dim_shape(const Shape& s) {
    return s.size() >= 2 ? s[1] : -1;
  }

  template <class F>
  static void apply_chan(Tensor<T>& x, const Tensor<T>& c, F f) {
    int C = chan_dim(x);
    require(c.numel() == C, ErrorCode::shape_mismatch, "channel operand size");
    int64_t hw = x.rank() == 2 ? 1 : static_cast<int64_t>(x.dim(2)) * x.dim(3);
    T* p = x.data();
    for (int n = 0; n < x.dim(0); ++n)
      for (int j = 0; j < C; ++j) {
        T e = c.v[static_cast<size_t>(j)];
        T* q = p;
        for (int64_t i = 0; i < hw; ++i) f(q[i], e);
        p += hw;
      }
  }

  template <class F>
  static void apply_chan_idx(Tensor<T>& x, F f) {
    int C = chan_dim(x);
    if (x.rank() == 2) {
      T* p = x.data();
      for (int n = 0; n < x.dim(0); ++n)
        for (int j = 0; j < C; ++j) f(*p++, j);
    } else {
      int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
      T* p = x.data();
      for (int n = 0; n < x.dim(0); ++n)
        for (int j = 0; j < C; ++j)
          for (int64_t i = 0; i < hw; ++i) f(*p++, j);
    }
  }

  template <class F>
  static void for_each_chan(const Tensor<T>& x, F f) {
    int C = chan_dim(x);
    if (x.rank() == 2) {
      const T* p = x.data();
      for (int n = 0; n < x.dim(0); ++n)
        for (int j = 0; j < C; ++j) f(j, *p++);
    } else {
      int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
      const T* p = x.data();
      for (int n = 0; n < x.dim(0); ++n)
        for (int j = 0; j < C; ++j)
          for (int64_t i = 0; i < hw; ++i) f(j, *p++);
    }
  }

  Var nc_op(Var x, Var s, bool is_scale) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& sv = value(s);
    require(xv.rank() == 4 && sv.rank() == 2 && sv.dim(0) == xv.dim(0) &&
                sv.dim(1) == xv.dim(1),
            ErrorCode::shape_mismatch, "per-sample channel affine");
    Tensor<T> out = xv;
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    T* p = out.data();
    for (int n = 0; n < xv.dim(0); ++n)
      for (int c = 0; c < xv.dim(1); ++c) {
        T e = sv(n, c);
        for (int64_t i = 0; i < hw; ++i) {
          if (is_scale)
            *p++ *= e;
          else
            *p++ += e;
        }
      }
    if (is_scale) {
      return push(std::move(out), needs_grad(x) || needs_grad(s),
                  [x, s](Tape& t, Var, Var g) {
                    t.accum(x, t.scale_nc(g, s));
                    t.accum(s, t.reduce_hw(t.mul(g, x)));
                  });
    }
    return push(std::move(out), needs_grad(x) || needs_grad(s),
                [x, s](Tape& t, Var, Var g) {
                  t.accum(x, g);
                  t.accum(s, t.reduce_hw(g));
                });
  }

  // Reused per-thread column buffer; contents are fully overwritten by each
  // im2col before use.
  static std::vector<T>& col_scratch(int which, size_t n) {
    thread_local std::vector<T> buf[2];
    if (buf[which].size() < n) buf[which].resize(n);
    return buf[which];
  }

  // Images per GEMM: group until the GEMM has ~16k spatial columns (enough
  // to amortize packing even when channel counts are tiny), bounded by a
  // buffer budget.
  static int conv_chunk(int ck, int co, int hw, int n) {
    int64_t budget = 6 << 20;
    int64_t per_img = static_cast<int64_t>(ck + co) * hw * sizeof(T);
    int bmax = std::max<int64_t>(1, budget / per_img);
    int target = std::max(1, 16384 / hw);
    return std::min({n, bmax, target});
  }

  static Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& k) {
    require(x.rank() == 4 && k.rank() == 4, ErrorCode::shape_mismatch,
            "conv2d rank");
    if (x.dim(1) != k.dim(1))
      fail(ErrorCode::shape_mismatch,
           "conv2d channels: input " + shape_str(x.shape) + " kernel " +
               shape_str(k.shape));
    int kh = k.dim(2), kw = k.dim(3);
    require(kh % 2 == 1 && kw % 2 == 1, ErrorCode::invalid_argument,
            "conv2d supports odd kernels only");
    int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = k.dim(0), hw = H * W;
    Tensor<T> out = Tensor<T>::uninit({N, Co, H, W});
    if (kh == 1 && kw == 1) {
      // pointwise over the whole batch: x is its own column matrix
      for (int n = 0; n < N; ++n)
        mm_nn(k.data(), x.data() + static_cast<int64_t>(n) * Ci * hw,
              out.data() + static_cast<int64_t>(n) * Co * hw, Co, Ci, hw);
      return out;
    }
    int ck = Ci * kh * kw;
    int B = conv_chunk(ck, Co, hw, N);
    std::vector<T>& col = col_scratch(0, static_cast<size_t>(ck) * B * hw);
    std::vector<T>& outc = col_scratch(1, static_cast<size_t>(Co) * B * hw);
    for (int n0 = 0; n0 < N; n0 += B) {
      int bc = std::min(B, N - n0);
      int64_t ld = static_cast<int64_t>(bc) * hw;
      for (int b = 0; b < bc; ++b)
        im2col(x.data() + static_cast<int64_t>(n0 + b) * Ci * hw, Ci, H, W, kh,
               kw, col.data(), ld, static_cast<int64_t>(b) * hw);
      if (bc == 1) {
        gemm_conv(k.data(), col.data(),
                  out.data() + static_cast<int64_t>(n0) * Co * hw, Co, ck, hw);
        continue;
      }
      gemm_conv(k.data(), col.data(), outc.data(), Co, ck, static_cast<int>(ld));
      for (int b = 0; b < bc; ++b) {
        T* dst = out.data() + static_cast<int64_t>(n0 + b) * Co * hw;
        for (int co = 0; co < Co; ++co)
          std::memcpy(dst + static_cast<int64_t>(co) * hw,
                      outc.data() + co * ld + static_cast<int64_t>(b) * hw,
                      static_cast<size_t>(hw) * sizeof(T));
      }
    }
    return out;
  }

  static Tensor<T> conv2d_wgrad_forward(const Tensor<T>& x, const Tensor<T>& gy,
                                        int kh, int kw) {
    require(x.rank() == 4 && gy.rank() == 4 && x.dim(0) == gy.dim(0) &&
                x.dim(2) == gy.dim(2) && x.dim(3) == gy.dim(3),
            ErrorCode::shape_mismatch, "conv2d_wgrad shapes");
    int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = gy.dim(1), hw = H * W;
    Tensor<T> out({Co, Ci, kh, kw});
    if (kh == 1 && kw == 1) {
      for (int n = 0; n < N; ++n)
        gemm_wgrad(gy.data() + static_cast<int64_t>(n) * Co * hw,
                   x.data() + static_cast<int64_t>(n) * Ci * hw, out.data(),
                   Co, Ci, hw);
      return out;
    }
    int ck = Ci * kh * kw;
    int B = conv_chunk(ck, Co, hw, N);
    std::vector<T>& col = col_scratch(0, static_cast<size_t>(ck) * B * hw);
    std::vector<T>& gyc = col_scratch(1, static_cast<size_t>(Co) * B * hw);
    for (int n0 = 0; n0 < N; n0 += B) {
      int bc = std::min(B, N - n0);
      int64_t ld = static_cast<int64_t>(bc) * hw;
      for (int b = 0; b < bc; ++b)
        im2col(x.data() + static_cast<int64_t>(n0 + b) * Ci * hw, Ci, H, W, kh,
               kw, col.data(), ld, static_cast<int64_t>(b) * hw);
      if (bc == 1) {
        gemm_wgrad(gy.data() + static_cast<int64_t>(n0) * Co * hw, col.data(),
                   out.data(), Co, ck, hw);
        continue;
      }
      for (int b = 0; b < bc; ++b) {
        const T* src = gy.data() + static_cast<int64_t>(n0 + b) * Co * hw;
        for (int co = 0; co < Co; ++co)
          std::memcpy(gyc.data() + co * ld + static_cast<int64_t>(b) * hw,
                      src + static_cast<int64_t>(co) * hw,
                      static_cast<size_t>(hw) * sizeof(T));
      }
      gemm_wgrad(gyc.data(), col.data(), out.data(), Co, ck,
                 static_cast<int>(ld));
    }
    return out;
  }

  // Column buffer layout: row-major (ck, hw) with k = (c*kh+r)*kw+s, so each
  // (k, h) slice is a shifted image row and fills with memcpy.
  static void im2col(const T* img, int C, int H, int W, int kh, int kw, T* col,
                     int64_t ld, int64_t off) {
    int ph = kh / 2, pw = kw / 2;
    int64_t hw = static_cast<int64_t>(H) * W;
    for (int c = 0; c < C; ++c) {
      const T* plane = img + static_cast<int64_t>(c) * hw;
      for (int r = 0; r < kh; ++r)
        for (int s = 0; s < kw; ++s) {
          int krow = (c * kh + r) * kw + s;
          T* dst = col + krow * ld + off;
          for (int h = 0; h < H; ++h, dst += W) {
            int y = h + r - ph;
            if (y < 0 || y >= H) {
              std::fill(dst, dst + W, T(0));
              continue;
            }
            int w0 = std::max(0, pw - s);
            int w1 = std::min(W, W + pw - s);
            if (w0 > 0) std::fill(dst, dst + w0, T(0));
            std::memcpy(dst + w0, plane + static_cast<int64_t>(y) * W + w0 + s - pw,
                        static_cast<size_t>(w1 - w0) * sizeof(T));
            if (w1 < W) std::fill(dst + w1, dst + W, T(0));
          }
        }
    }
  }
};

template <class T>
using Var = typename Tape<T>::Var;

}  // namespace ssgan
