#pragma once

#include <Eigen/Core>

namespace ssgan {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// C(m,n) = A(m,k) * B(k,n), all row-major buffers.
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  Eigen::Map<const MatRM<T>> A(a, m, k);
  Eigen::Map<const MatRM<T>> B(b, k, n);
  Eigen::Map<MatRM<T>> C(c, m, n);
  C.noalias() = A * B;
}

// C(m,n) = A(m,k) * B(n,k)^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  Eigen::Map<const MatRM<T>> A(a, m, k);
  Eigen::Map<const MatRM<T>> B(b, n, k);
  Eigen::Map<MatRM<T>> C(c, m, n);
  C.noalias() = A * B.transpose();
}

// C(m,n) = A(k,m)^T * B(k,n)
template <class T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  Eigen::Map<const MatRM<T>> A(a, k, m);
  Eigen::Map<const MatRM<T>> B(b, k, n);
  Eigen::Map<MatRM<T>> C(c, m, n);
  C.noalias() = A.transpose() * B;
}

// out(cout, hw) row-major = K(cout, ck) row-major * col(ck, hw) row-major.
template <class T>
void gemm_conv(const T* kmat, const T* col, T* out, int cout, int ck, int hw) {
  Eigen::Map<const MatRM<T>> K(kmat, cout, ck);
  Eigen::Map<const MatRM<T>> C(col, ck, hw);
  Eigen::Map<MatRM<T>> O(out, cout, hw);
  O.noalias() = K * C;
}

// gk(cout, ck) += gy(cout, hw) row-major * col(ck, hw)^T
template <class T>
void gemm_wgrad(const T* gy, const T* col, T* gk, int cout, int ck, int hw) {
  Eigen::Map<const MatRM<T>> G(gy, cout, hw);
  Eigen::Map<const MatRM<T>> C(col, ck, hw);
  Eigen::Map<MatRM<T>> K(gk, cout, ck);
  K.noalias() += G * C.transpose();
}

}  // namespace ssgan
