#include "dreg/kernels.hpp"

namespace dreg::kernels {
namespace {

void axpy_scalar(std::size_t n, double a, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void mul_acc_scalar(std::size_t n, const double* x, const double* y, double* z) {
    for (std::size_t i = 0; i < n; ++i) z[i] += x[i] * y[i];
}

double sum_scalar(std::size_t n, const double* x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void affine_scalar(std::size_t n, double a, double b, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i] + b;
}

void gemm_scalar(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
            if (av == 0.0) continue;
            if (trans_b) {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
            } else {
                axpy_scalar(n, av, b + p * ldb, crow);
            }
        }
    }
}

constexpr KernelTable kScalar{
    Isa::scalar, "scalar", axpy_scalar, dot_scalar, mul_acc_scalar, sum_scalar, affine_scalar, gemm_scalar,
};

} // namespace

const KernelTable& scalar_table() noexcept { return kScalar; }

} // namespace dreg::kernels
