#pragma once

#include <optional>
#include <vector>

#include "ssgan/image.hpp"
#include "ssgan/rng.hpp"
#include "ssgan/tape.hpp"

namespace ssgan {

// Minimax value function, analysis and testing only; training uses hinge.
// Inputs are the discriminator's probabilities that samples are real.
inline double value_function_eq1(const std::vector<double>& p_real,
                                 const std::vector<double>& p_fake) {
  require(!p_real.empty() && !p_fake.empty(), ErrorCode::invalid_argument,
          "value_function: empty inputs");
  constexpr double kClamp = 1e-7;
  auto mean_log = [kClamp](const std::vector<double>& p, bool complement) {
    double s = 0;
    for (double x : p) {
      require(x >= 0.0 && x <= 1.0, ErrorCode::invalid_argument,
              "value_function: probability outside [0,1]");
      double q = complement ? 1.0 - x : x;
      s += std::log(std::clamp(q, kClamp, 1.0 - kClamp));
    }
    return s / static_cast<double>(p.size());
  };
  return mean_log(p_real, false) + mean_log(p_fake, true);
}

// d = mean(max(0, 1-real)) + mean(max(0, 1+fake)); g = -mean(fake).
template <class T>
typename Tape<T>::Var hinge_d_loss(Tape<T>& t, typename Tape<T>::Var real_logits,
                                   typename Tape<T>::Var fake_logits) {
  auto real_term = t.mean_all(t.relu(t.add_scalar(t.neg(real_logits), T(1))));
  auto fake_term = t.mean_all(t.relu(t.add_scalar(fake_logits, T(1))));
  return t.add(real_term, fake_term);
}

template <class T>
typename Tape<T>::Var hinge_g_loss(Tape<T>& t, typename Tape<T>::Var fake_logits) {
  return t.neg(t.mean_all(fake_logits));
}

inline double hinge_d_loss_value(const std::vector<double>& real,
                                 const std::vector<double>& fake) {
  double a = 0, b = 0;
  for (double x : real) a += std::max(0.0, 1.0 - x);
  for (double x : fake) b += std::max(0.0, 1.0 + x);
  return a / real.size() + b / fake.size();
}

inline double hinge_g_loss_value(const std::vector<double>& fake) {
  double s = 0;
  for (double x : fake) s += x;
  return -s / fake.size();
}

// Mean negative log-likelihood of the rotation head, -E[log Q_D(R=r|x^r)].
template <class T>
typename Tape<T>::Var rotation_nll(Tape<T>& t, typename Tape<T>::Var rot_logits,
                                   const std::vector<RotationLabel>& labels) {
  const Tensor<T>& lv = t.value(rot_logits);
  require(lv.rank() == 2 && lv.dim(1) == 4, ErrorCode::shape_mismatch,
          "rotation_nll expects (N,4) logits");
  std::vector<int> raw(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    validate_rotation(labels[i]);
    raw[i] = labels[i].k;
  }
  return t.softmax_xent_mean(rot_logits, raw);
}

// lambda * E[(||grad_xhat gan_logit(xhat)||_2 - 1)^2] over per-sample uniform
// interpolates between real and fake. `gan_logit_fn` maps an image var to (N)
// logits; the returned var is twice-differentiable so the penalty can train
// discriminator parameters.
template <class T, class F>
typename Tape<T>::Var gradient_penalty(Tape<T>& t, F&& gan_logit_fn,
                                       const Tensor<T>& real,
                                       const Tensor<T>& fake, T lambda,
                                       DetRng& rng) {
  require(real.shape == fake.shape, ErrorCode::shape_mismatch,
          "gradient_penalty: real/fake shapes differ");
  require(lambda >= T(0), ErrorCode::invalid_argument,
          "gradient_penalty: lambda >= 0");
  int n = real.dim(0);
  int64_t row = real.numel() / n;
  Tensor<T> mix = real;
  for (int i = 0; i < n; ++i) {
    T u = static_cast<T>(rng.uniform());
    for (int64_t j = 0; j < row; ++j) {
      int64_t k = i * row + j;
      mix.v[k] = u * real.v[k] + (T(1) - u) * fake.v[k];
    }
  }
  auto xhat = t.leaf(std::move(mix), true);
  auto logit = gan_logit_fn(t, xhat);
  auto s = t.sum_all(logit);  // rows are independent, so this stacks per-sample grads
  typename Tape<T>::Var wrt[] = {xhat};
  auto gx = t.grad(s, wrt)[0];
  require(gx.valid(), ErrorCode::invalid_argument,
          "gradient_penalty: logit does not depend on input");
  auto sq = t.reduce_sample(t.mul(gx, gx));
  auto norm = t.sqrt_shift(sq, T(1e-12));
  auto d = t.add_scalar(norm, T(-1));
  return t.mul_scalar(t.mean_all(t.mul(d, d)), lambda);
}

// All loss pieces of one step plus the weights in effect. Totals are exactly
// g_gan + alpha*g_rot and d_gan + beta*d_rot + penalty as composed.
template <class T>
struct LossBundle {
  double g_total = 0, d_total = 0;
  double g_gan = 0, g_rot = 0, d_gan = 0, d_rot = 0, penalty = 0;
  double alpha = 0, beta = 0;
  typename Tape<T>::Var g_total_var{}, d_total_var{};
};

template <class T>
struct ComposeInputs {
  using V = typename Tape<T>::Var;
  std::optional<V> real_up_gan;   // (N) gan logits on upright real
  std::optional<V> fake_up_gan;   // (N) gan logits on upright fake
  std::optional<V> real_rot_logits;  // (4*n_base, 4)
  std::vector<RotationLabel> real_rot_labels;
  std::optional<V> fake_rot_logits;
  std::vector<RotationLabel> fake_rot_labels;
  std::optional<V> penalty;  // already weighted by lambda
};

// Gradient routing composition: the discriminator total carries no dependence
// on the fake rotation head, the generator total none on the real rotation
// loss. Zero-weight terms are skipped outright so a run with alpha=beta=0
// executes exactly the plain hinge-GAN op sequence.
template <class T>
LossBundle<T> compose_losses(Tape<T>& t, const ComposeInputs<T>& in, double alpha,
                             double beta) {
  LossBundle<T> out;
  out.alpha = alpha;
  out.beta = beta;
  bool d_side = in.real_up_gan.has_value() || in.penalty.has_value() ||
                (beta > 0 && in.real_rot_logits.has_value());
  bool g_side = in.fake_up_gan.has_value() || (alpha > 0 && in.fake_rot_logits);

  if (d_side) {
    require(in.real_up_gan && in.fake_up_gan, ErrorCode::invalid_argument,
            "compose_losses: discriminator side needs both upright logit sets");
    auto d = hinge_d_loss(t, *in.real_up_gan, *in.fake_up_gan);
    out.d_gan = t.value(d).v[0];
    if (beta > 0) {
      require(in.real_rot_logits.has_value(), ErrorCode::invalid_argument,
              "compose_losses: beta > 0 requires the rotated real batch");
      auto rot = rotation_nll(t, *in.real_rot_logits, in.real_rot_labels);
      out.d_rot = t.value(rot).v[0];
      d = t.add(d, t.mul_scalar(rot, static_cast<T>(beta)));
    }
    if (in.penalty) {
      out.penalty = t.value(*in.penalty).v[0];
      d = t.add(d, *in.penalty);
    }
    out.d_total_var = d;
    out.d_total = t.value(d).v[0];
  }

  if (g_side) {
    require(in.fake_up_gan.has_value(), ErrorCode::invalid_argument,
            "compose_losses: generator side needs fake upright logits");
    auto g = hinge_g_loss(t, *in.fake_up_gan);
    out.g_gan = t.value(g).v[0];
    if (alpha > 0) {
      require(in.fake_rot_logits.has_value(), ErrorCode::invalid_argument,
              "compose_losses: alpha > 0 requires the rotated fake batch");
      auto rot = rotation_nll(t, *in.fake_rot_logits, in.fake_rot_labels);
      out.g_rot = t.value(rot).v[0];
      g = t.add(g, t.mul_scalar(rot, static_cast<T>(alpha)));
    }
    out.g_total_var = g;
    out.g_total = t.value(g).v[0];
  }
  return out;
}

}  // namespace ssgan
