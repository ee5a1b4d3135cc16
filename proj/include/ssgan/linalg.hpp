#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "ssgan/common.hpp"
#include "ssgan/gemm.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// Symmetric PSD matrix square root via eigendecomposition: clamp small
// negative eigenvalues to zero, reconstruct with square-rooted eigenvalues.
// Negative eigenvalues beyond tolerance signal a broken covariance upstream
// and are an error. Tolerances scale with the largest eigenvalue so large
// covariances do not trip false positives.
inline Tensor<double> sqrtm_psd(const Tensor<double>& m) {
  require(m.rank() == 2 && m.dim(0) == m.dim(1), ErrorCode::shape_mismatch,
          "sqrtm_psd: square matrix required, got " + shape_str(m.shape));
  int d = m.dim(0);
  double max_abs = 0;
  for (double x : m.v) max_abs = std::max(max_abs, std::abs(x));
  double sym_tol = 1e-8 * std::max(1.0, max_abs);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      require(std::abs(m(i, j) - m(j, i)) <= sym_tol, ErrorCode::invalid_argument,
              "sqrtm_psd: input not symmetric within tolerance");

  Eigen::Map<const Eigen::MatrixXd> M(m.data(), d, d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  require(es.info() == Eigen::Success, ErrorCode::invalid_argument,
          "sqrtm_psd: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  double neg_tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (int i = 0; i < d; ++i) {
    require(ev(i) >= -neg_tol, ErrorCode::invalid_argument,
            "sqrtm_psd: eigenvalue below -1e-8, input is not PSD");
    ev(i) = ev(i) > 0 ? std::sqrt(ev(i)) : 0.0;
  }
  Eigen::MatrixXd S = es.eigenvectors() * ev.asDiagonal() *
                      es.eigenvectors().transpose();
  // Enforce exact symmetry of the reconstruction.
  S = 0.5 * (S + S.transpose()).eval();
  Tensor<double> out({d, d});
  Eigen::Map<Eigen::MatrixXd>(out.data(), d, d) = S;
  return out;
}

// One-sided power iteration for the top singular value. `u` is the persistent
// left-vector estimate; callers keep it across training steps and advance it
// one iteration per step.
template <class T>
struct SigmaEstimate {
  T sigma;
  std::vector<T> u;
};

template <class T>
SigmaEstimate<T> power_iteration_sigma(const Tensor<T>& w,
                                       const std::vector<T>& u_in, int iters) {
  require(w.rank() == 2, ErrorCode::shape_mismatch, "power_iteration: matrix");
  int m = w.dim(0), n = w.dim(1);
  require(static_cast<int>(u_in.size()) == m, ErrorCode::shape_mismatch,
          "power_iteration: u length");
  double wnorm = 0;
  for (T x : w.v) wnorm += static_cast<double>(x) * static_cast<double>(x);
  if (wnorm == 0) return {T(0), u_in};

  std::vector<double> u(u_in.begin(), u_in.end());
  std::vector<double> v(n);
  const double tiny = 1e-30;
  for (int it = 0; it < iters; ++it) {
    // v = W^T u / ||.||
    std::fill(v.begin(), v.end(), 0.0);
    for (int i = 0; i < m; ++i) {
      double ui = u[i];
      const T* row = w.data() + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) v[j] += ui * static_cast<double>(row[j]);
    }
    double vn = 0;
    for (double x : v) vn += x * x;
    vn = std::sqrt(vn);
    if (vn < tiny) {
      // u is orthogonal to the row space; restart from the largest row.
      int best = 0;
      double bestn = -1;
      for (int i = 0; i < m; ++i) {
        double rn = 0;
        const T* row = w.data() + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) rn += static_cast<double>(row[j]) * row[j];
        if (rn > bestn) { bestn = rn; best = i; }
      }
      std::fill(u.begin(), u.end(), 0.0);
      u[best] = 1.0;
      continue;
    }
    for (double& x : v) x /= vn;
    // u = W v / ||.||
    std::fill(u.begin(), u.end(), 0.0);
    for (int i = 0; i < m; ++i) {
      const T* row = w.data() + static_cast<int64_t>(i) * n;
      double s = 0;
      for (int j = 0; j < n; ++j) s += static_cast<double>(row[j]) * v[j];
      u[i] = s;
    }
    double un = 0;
    for (double x : u) un += x * x;
    un = std::sqrt(un);
    if (un < tiny) continue;
    for (double& x : u) x /= un;
  }
  // sigma = u^T W v
  double sigma = 0;
  for (int i = 0; i < m; ++i) {
    const T* row = w.data() + static_cast<int64_t>(i) * n;
    double s = 0;
    for (int j = 0; j < n; ++j) s += static_cast<double>(row[j]) * v[j];
    sigma += u[i] * s;
  }
  SigmaEstimate<T> out;
  out.sigma = static_cast<T>(sigma);
  out.u.assign(u.begin(), u.end());
  return out;
}

// Largest singular value by full SVD. Used as the independent oracle in tests
// and acceptance checks, never inside the training path.
template <class T>
double svd_top_singular_value(const Tensor<T>& w) {
  Tensor<double> wd = w.template cast<double>();
  Eigen::Map<const MatRM<double>> M(wd.data(), wd.dim(0), wd.dim(1));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  return svd.singularValues()(0);
}

}  // namespace ssgan
