#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace ssgan {

// splitmix64 step. Fixed integer arithmetic, identical on every platform.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stream identifiers. A (seed, stream, step, substep) tuple fully determines
// every random value drawn during a run, so resuming from a checkpoint does
// not need any RNG state.
enum class Stream : uint64_t {
  param_init = 1,
  latent = 2,
  data = 3,
  penalty = 4,
  dataset = 5,
  eval = 6,
  probe = 7,
  embedder = 8,
  generic = 9,
};

inline uint64_t stream_key(uint64_t seed, Stream s, uint64_t step = 0,
                           uint64_t sub = 0) {
  uint64_t k = mix64(seed ^ 0x5851f42d4c957f2dull);
  k = mix64(k ^ (static_cast<uint64_t>(s) * 0x9e3779b97f4a7c15ull));
  k = mix64(k ^ step);
  k = mix64(k ^ (sub * 0xda942042e4dd58b5ull));
  return k;
}

// Deterministic generator over a splitmix64 sequence. Not cryptographic;
// statistical quality is sufficient for sampling latents and shuffles.
class DetRng {
 public:
  explicit DetRng(uint64_t key) : state_(key) {}
  DetRng(uint64_t seed, Stream s, uint64_t step = 0, uint64_t sub = 0)
      : state_(stream_key(seed, s, step, sub)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Widening multiply keeps this branch-free and
  // platform independent.
  uint64_t randint(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Marsaglia polar method. Consumes a deterministic number of draws per
  // accepted pair; the spare is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double r = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * r;
    has_spare_ = true;
    return u * r;
  }

  template <class T>
  void fill_normal(std::span<T> out, double scale = 1.0) {
    for (auto& x : out) x = static_cast<T>(normal() * scale);
  }

  template <class T>
  void fill_uniform(std::span<T> out, double lo, double hi) {
    for (auto& x : out) x = static_cast<T>(uniform(lo, hi));
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// sin/cos on [0, 2pi) via an 11-term Taylor series after range reduction to
// [-pi/4, pi/4]. libm trigonometry is not bit-stable across platforms; the
// synthetic dataset renderer needs bit-stable angles, so it uses these.
namespace detail {
inline double sin_poly(double x) {
  double x2 = x * x;
  // Horner form of the Taylor series up to x^11.
  double r = -2.5052108385441718e-08;
  r = r * x2 + 2.7557319223985893e-06;
  r = r * x2 - 1.9841269841269841e-04;
  r = r * x2 + 8.3333333333333333e-03;
  r = r * x2 - 1.6666666666666666e-01;
  r = r * x2 + 1.0;
  return x * r;
}
inline double cos_poly(double x) {
  double x2 = x * x;
  double r = -2.7557319223985888e-07;
  r = r * x2 + 2.4801587301587302e-05;
  r = r * x2 - 1.3888888888888889e-03;
  r = r * x2 + 4.1666666666666666e-02;
  r = r * x2 - 5.0e-01;
  return r * x2 + 1.0;
}
}  // namespace detail

inline void det_sincos(double theta, double& s, double& c) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  constexpr double kHalfPi = 1.5707963267948966192313216916398;
  theta -= kTwoPi * std::floor(theta / kTwoPi);
  // Reduce to a quadrant plus an offset in [-pi/4, pi/4].
  int quad = static_cast<int>(std::floor(theta / kHalfPi + 0.5)) & 3;
  double x = theta - kHalfPi * std::floor(theta / kHalfPi + 0.5);
  double sp = detail::sin_poly(x);
  double cp = detail::cos_poly(x);
  switch (quad) {
    case 0: s = sp; c = cp; break;
    case 1: s = cp; c = -sp; break;
    case 2: s = -sp; c = -cp; break;
    default: s = -cp; c = sp; break;
  }
}

}  // namespace ssgan
