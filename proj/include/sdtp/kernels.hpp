#pragma once

// Low-level numeric kernels shared by the tape primitives and the raw
// inference path. Keeping one implementation of each op is what makes the
// masked-vs-gathered and taped-vs-raw equivalence checks tight.

#include <algorithm>
#include <cmath>
#include <cstddef>

#ifdef SDTP_USE_BLAS
#include <cblas.h>
#endif

namespace sdtp::kern {

// C = alpha * op(A) * op(B) + beta * C, row-major.
// A is m x k after transposition, B is k x n after transposition.
template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Real alpha, const Real* a, int lda,
          const Real* b, int ldb, Real beta, Real* c, int ldc);

#ifdef SDTP_USE_BLAS
template <>
inline void gemm<float>(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
                        int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
template <>
inline void gemm<double>(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                         int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
#endif

// Portable blocked fallback; also the only path when BLAS is off.
template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Real alpha, const Real* a, int lda,
          const Real* b, int ldb, Real beta, Real* c, int ldc) {
    auto aat = [&](int i, int p) { return trans_a ? a[static_cast<size_t>(p) * lda + i] : a[static_cast<size_t>(i) * lda + p]; };
    auto bat = [&](int p, int j) { return trans_b ? b[static_cast<size_t>(j) * ldb + p] : b[static_cast<size_t>(p) * ldb + j]; };
    for (int i = 0; i < m; i++) {
        for (int j = 0; j < n; j++) {
            Real acc = 0;
            for (int p = 0; p < k; p++) acc += aat(i, p) * bat(p, j);
            Real* out = &c[static_cast<size_t>(i) * ldc + j];
            *out = alpha * acc + beta * (*out);
        }
    }
}

inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;
inline constexpr double kLayerNormEps = 1e-5;

// tanh-approximate GELU; the adjoint below differentiates this same form.
template <typename Real>
inline Real gelu(Real x) {
    Real u = Real(kGeluC0) * (x + Real(kGeluC1) * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <typename Real>
inline Real gelu_grad(Real x) {
    Real u = Real(kGeluC0) * (x + Real(kGeluC1) * x * x * x);
    Real t = std::tanh(u);
    Real sech2 = Real(1) - t * t;
    Real du = Real(kGeluC0) * (Real(1) + Real(3) * Real(kGeluC1) * x * x);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * sech2 * du;
}

// In-place softmax over x[0..n), numerically stabilized. Entries below
// (max - 80) underflow to exactly zero, which is what makes additive
// -1e9 masking agree bit-for-bit with physically removing a key.
template <typename Real>
inline void softmax_inplace(Real* x, int n) {
    Real mx = x[0];
    for (int i = 1; i < n; i++) mx = std::max(mx, x[i]);
    Real sum = 0;
    for (int i = 0; i < n; i++) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    Real inv = Real(1) / sum;
    for (int i = 0; i < n; i++) x[i] *= inv;
}

// y = (x - mean) / sqrt(var + eps) over one row.
template <typename Real>
inline void layer_norm_row(const Real* x, Real* y, int n) {
    Real mean = 0;
    for (int i = 0; i < n; i++) mean += x[i];
    mean /= Real(n);
    Real var = 0;
    for (int i = 0; i < n; i++) {
        Real d = x[i] - mean;
        var += d * d;
    }
    var /= Real(n);
    Real inv = Real(1) / std::sqrt(var + Real(kLayerNormEps));
    for (int i = 0; i < n; i++) y[i] = (x[i] - mean) * inv;
}

// Numerically stable log(1 + exp(x)).
template <typename Real>
inline Real log1p_exp(Real x) {
    if (x > Real(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <typename Real>
inline Real sigmoid(Real x) {
    if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
    Real e = std::exp(x);
    return e / (Real(1) + e);
}

}  // namespace sdtp::kern
