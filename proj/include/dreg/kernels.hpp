#pragma once

// Dense double-precision inner loops used by the convolution and reduction
// code. Every kernel has a scalar reference implementation; wider variants are
// compiled in separate translation units and chosen once per process.

#include <cstddef>
#include <span>
#include <string_view>

namespace dreg::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    const char* name;
    // y[i] += a * x[i]
    void (*axpy)(std::size_t n, double a, const double* x, double* y);
    // sum x[i] * y[i]
    double (*dot)(std::size_t n, const double* x, const double* y);
    // z[i] += x[i] * y[i]
    void (*mul_acc)(std::size_t n, const double* x, const double* y, double* z);
    // sum x[i]
    double (*sum)(std::size_t n, const double* x);
    // y[i] = a * x[i] + b
    void (*affine)(std::size_t n, double a, double b, const double* x, double* y);
    // C += op(A) op(B), row-major with leading dimensions; op(A) is m x k,
    // op(B) is k x n, and a transposed operand is read as its transpose.
    void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc);
};

const KernelTable& scalar_table() noexcept;

// nullptr when the AVX2 variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table() noexcept;

// The table every caller goes through. Defaults to the widest supported ISA;
// the DREG_KERNELS environment variable ("scalar" / "avx2") overrides it.
const KernelTable& active() noexcept;

// Test hook: switch the active table. Returns false if the ISA is unavailable.
bool select(Isa isa) noexcept;

std::string_view isa_name(Isa isa) noexcept;

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    active().axpy(x.size(), a, x.data(), y.data());
}

inline double dot(std::span<const double> x, std::span<const double> y) {
    return active().dot(x.size(), x.data(), y.data());
}

inline double sum(std::span<const double> x) { return active().sum(x.size(), x.data()); }

} // namespace dreg::kernels
