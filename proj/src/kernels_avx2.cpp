// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "vif/kernels.hpp"

#include <immintrin.h>

#include <vector>

namespace vif::kernels::avx2 {
namespace {

inline double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot(std::size_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void mul_inplace(std::size_t n, const double* x, double* y) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] *= x[i];
}

// 4x8 register tile of C; B rows are streamed, A entries broadcast.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            __m256d c00, c01, c10, c11, c20, c21, c30, c31;
            if (accumulate) {
                c00 = _mm256_loadu_pd(c + (i + 0) * ldc + j);
                c01 = _mm256_loadu_pd(c + (i + 0) * ldc + j + 4);
                c10 = _mm256_loadu_pd(c + (i + 1) * ldc + j);
                c11 = _mm256_loadu_pd(c + (i + 1) * ldc + j + 4);
                c20 = _mm256_loadu_pd(c + (i + 2) * ldc + j);
                c21 = _mm256_loadu_pd(c + (i + 2) * ldc + j + 4);
                c30 = _mm256_loadu_pd(c + (i + 3) * ldc + j);
                c31 = _mm256_loadu_pd(c + (i + 3) * ldc + j + 4);
            } else {
                c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
            }
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
                const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
                __m256d av = _mm256_broadcast_sd(a + (i + 0) * lda + p);
                c00 = _mm256_fmadd_pd(av, b0, c00);
                c01 = _mm256_fmadd_pd(av, b1, c01);
                av = _mm256_broadcast_sd(a + (i + 1) * lda + p);
                c10 = _mm256_fmadd_pd(av, b0, c10);
                c11 = _mm256_fmadd_pd(av, b1, c11);
                av = _mm256_broadcast_sd(a + (i + 2) * lda + p);
                c20 = _mm256_fmadd_pd(av, b0, c20);
                c21 = _mm256_fmadd_pd(av, b1, c21);
                av = _mm256_broadcast_sd(a + (i + 3) * lda + p);
                c30 = _mm256_fmadd_pd(av, b0, c30);
                c31 = _mm256_fmadd_pd(av, b1, c31);
            }
            _mm256_storeu_pd(c + (i + 0) * ldc + j, c00);
            _mm256_storeu_pd(c + (i + 0) * ldc + j + 4, c01);
            _mm256_storeu_pd(c + (i + 1) * ldc + j, c10);
            _mm256_storeu_pd(c + (i + 1) * ldc + j + 4, c11);
            _mm256_storeu_pd(c + (i + 2) * ldc + j, c20);
            _mm256_storeu_pd(c + (i + 2) * ldc + j + 4, c21);
            _mm256_storeu_pd(c + (i + 3) * ldc + j, c30);
            _mm256_storeu_pd(c + (i + 3) * ldc + j + 4, c31);
        }
        for (; j < n; ++j) {
            for (std::size_t r = 0; r < 4; ++r) {
                double s = accumulate ? c[(i + r) * ldc + j] : 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a[(i + r) * lda + p] * b[p * ldb + j];
                c[(i + r) * ldc + j] = s;
            }
        }
    }
    for (; i < m; ++i) {
        double* crow = c + i * ldc;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        }
        for (std::size_t p = 0; p < k; ++p) axpy(n, a[i * lda + p], b + p * ldb, crow);
    }
}

// Small inner dims make per-element dot products slow; transpose the
// strided operand once and reuse the tiled kernel.
thread_local std::vector<double> scratch;

const double* transposed(std::size_t rows, std::size_t cols, const double* x, std::size_t ldx) {
    scratch.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) scratch[c * rows + r] = x[r * ldx + c];
    return scratch.data();
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    if (m < 4) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double s = dot(k, a + i * lda, b + j * ldb);
                c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
            }
        }
        return;
    }
    gemm(m, n, k, a, lda, transposed(n, k, b, ldb), n, c, ldc, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    gemm(m, n, k, transposed(k, m, a, lda), k, b, ldb, c, ldc, accumulate);
}

}  // namespace

const KernelTable& table() {
    static const KernelTable t{Isa::avx2, "avx2", gemm, gemm_nt, gemm_tn, dot, axpy, mul_inplace};
    return t;
}

}  // namespace vif::kernels::avx2
