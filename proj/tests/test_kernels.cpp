#include "doctest.h"

#include "dreg/kernels.hpp"
#include "dreg/tensor.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace dreg;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// Restores the default table even when a check fails.
struct IsaScope {
    const kernels::KernelTable* saved = &kernels::active();
    ~IsaScope() { kernels::select(saved->isa); }
};

} // namespace

TEST_CASE("scalar reference kernels") {
    const auto& k = kernels::scalar_table();
    std::vector<double> x{1, 2, 3}, y{4, 5, 6};
    CHECK(k.dot(3, x.data(), y.data()) == 32.0);
    CHECK(k.sum(3, x.data()) == 6.0);
    k.axpy(3, 2.0, x.data(), y.data());
    CHECK(y == std::vector<double>{6, 9, 12});
    std::vector<double> z{1, 1, 1};
    k.mul_acc(3, x.data(), x.data(), z.data());
    CHECK(z == std::vector<double>{2, 5, 10});
    k.affine(3, 2.0, -1.0, x.data(), z.data());
    CHECK(z == std::vector<double>{1, 3, 5});
}

TEST_CASE("SIMD kernels agree with the scalar reference") {
    const kernels::KernelTable* wide = kernels::avx2_table();
    if (!wide) {
        MESSAGE("AVX2 variant unavailable on this CPU/build; nothing to compare");
        return;
    }
    const auto& ref = kernels::scalar_table();
    // lengths straddle every unroll boundary and tail case
    for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 7u, 8u, 9u, 15u, 16u, 17u, 48u, 63u, 1000u}) {
        auto x = random_vec(n, 1 + n), y = random_vec(n, 1000 + n);
        double mag = 0.0;
        for (std::size_t i = 0; i < n; ++i) mag += std::abs(x[i] * y[i]);
        CHECK(std::abs(wide->dot(n, x.data(), y.data()) - ref.dot(n, x.data(), y.data())) <= 1e-14 * (mag + 1));

        double smag = 0.0;
        for (double v : x) smag += std::abs(v);
        CHECK(std::abs(wide->sum(n, x.data()) - ref.sum(n, x.data())) <= 1e-14 * (smag + 1));

        auto y1 = y, y2 = y;
        ref.axpy(n, 0.37, x.data(), y1.data());
        wide->axpy(n, 0.37, x.data(), y2.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= 4e-16 * (std::abs(y1[i]) + 1));

        auto z1 = y, z2 = y;
        ref.mul_acc(n, x.data(), x.data(), z1.data());
        wide->mul_acc(n, x.data(), x.data(), z2.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(z1[i] - z2[i]) <= 4e-16 * (std::abs(z1[i]) + 1));

        std::vector<double> a1(n), a2(n);
        ref.affine(n, -1.5, 0.25, x.data(), a1.data());
        wide->affine(n, -1.5, 0.25, x.data(), a2.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(a1[i] - a2[i]) <= 4e-16 * (std::abs(a1[i]) + 1));
    }
}

TEST_CASE("convolution results agree across kernel tables") {
    if (!kernels::avx2_table()) return;
    IsaScope scope;
    Tensor x = test::random_tensor({3, 9, 8, 10}, 5);
    Tensor w = test::random_tensor({4, 3, 3, 3, 3}, 6);
    Tensor b = test::random_tensor({4}, 7);

    auto run = [&](kernels::Isa isa) {
        REQUIRE(kernels::select(isa));
        x.zero_grad();
        w.zero_grad();
        Tensor y = conv3d(x, w, b, 1, 1);
        sum(square(y)).backward();
        std::vector<double> out(y.data().begin(), y.data().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto s = run(kernels::Isa::scalar);
    auto v = run(kernels::Isa::avx2);
    REQUIRE(s.size() == v.size());
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - v[i]) <= 1e-11 * (std::abs(s[i]) + 1));
}

TEST_CASE("kernel selection is stable and repeatable") {
    IsaScope scope;
    CHECK(kernels::select(kernels::Isa::scalar));
    CHECK(kernels::active().isa == kernels::Isa::scalar);
    Tensor x = test::random_tensor({2, 6, 6, 6}, 9);
    Tensor w = test::random_tensor({2, 2, 3, 3, 3}, 10);
    auto a = conv3d(x, w, Tensor(), 1, 1);
    auto b = conv3d(x, w, Tensor(), 1, 1);
    CHECK(test::max_abs_diff(a.data(), b.data()) == 0.0);
}
