// Compiled with -mavx2 -mfma. Nothing in here may run before the dispatcher
// has confirmed CPU support.

#include "kernels_internal.hpp"

#include <Eigen/Core>
#include <immintrin.h>

namespace dreg::kernels::detail {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

void axpy_avx2(std::size_t n, double a, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256d y0 = _mm256_loadu_pd(y + i);
        __m256d y1 = _mm256_loadu_pd(y + i + 4);
        y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
        y1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), y1);
        _mm256_storeu_pd(y + i, y0);
        _mm256_storeu_pd(y + i + 4, y1);
    }
    for (; i + 4 <= n; i += 4) {
        __m256d y0 = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0));
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void mul_acc_avx2(std::size_t n, const double* x, const double* y, double* z) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d z0 = _mm256_loadu_pd(z + i);
        _mm256_storeu_pd(z + i, _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), z0));
    }
    for (; i < n; ++i) z[i] += x[i] * y[i];
}

double sum_avx2(std::size_t n, const double* x) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += x[i];
    return acc;
}

void affine_avx2(std::size_t n, double a, double b, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(a);
    const __m256d vb = _mm256_set1_pd(b);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vb));
    for (; i < n; ++i) y[i] = a * x[i] + b;
}

// Eigen is included only in this translation unit, so its vectorized GEMM is
// never instantiated for the baseline ISA.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using Stride = Eigen::OuterStride<>;

void gemm_avx2(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
               std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    if (m == 0 || n == 0 || k == 0) return;
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
    Eigen::Map<RowMat, 0, Stride> C(c, M, N, Stride(static_cast<Eigen::Index>(ldc)));
    // A row-major buffer read transposed is a column-major view of op(A).
    auto run = [&](const auto& A) {
        if (trans_b) {
            C.noalias() += A * Eigen::Map<const ColMat, 0, Stride>(b, K, N, Stride(static_cast<Eigen::Index>(ldb)));
        } else {
            C.noalias() += A * Eigen::Map<const RowMat, 0, Stride>(b, K, N, Stride(static_cast<Eigen::Index>(ldb)));
        }
    };
    if (trans_a) {
        run(Eigen::Map<const ColMat, 0, Stride>(a, M, K, Stride(static_cast<Eigen::Index>(lda))));
    } else {
        run(Eigen::Map<const RowMat, 0, Stride>(a, M, K, Stride(static_cast<Eigen::Index>(lda))));
    }
}

constexpr KernelTable kAvx2{
    Isa::avx2, "avx2", axpy_avx2, dot_avx2, mul_acc_avx2, sum_avx2, affine_avx2, gemm_avx2,
};

} // namespace

const KernelTable* avx2_table_impl() noexcept { return &kAvx2; }

} // namespace dreg::kernels::detail
