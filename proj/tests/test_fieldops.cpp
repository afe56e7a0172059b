





#include "doctest.h"

#include "dreg/error.hpp"
#include "dreg/fieldops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <array>
#include <cmath>

using namespace dreg;
using dreg::test::smooth_tensor;

namespace {

DisplacementField constant_field(const Shape& spatial, double x, double y, double z) {
    const auto n = spatial[0] * spatial[1] * spatial[2];
    std::vector<double> v(static_cast<std::size_t>(3 * n));
    std::fill(v.begin(), v.begin() + n, x);
    std::fill(v.begin() + n, v.begin() + 2 * n, y);
    std::fill(v.begin() + 2 * n, v.end(), z);
    return {Tensor::from_data({3, spatial[0], spatial[1], spatial[2]}, std::move(v))};
}

// Rescales a smooth tensor so that its largest vector norm equals max_norm.
Tensor with_max_norm(Tensor t, double max_norm) {
    const auto n = t.numel() / 3;
    auto d = t.mutable_data();
    double m = 0.0;
    for (std::int64_t i = 0; i < n; ++i) m = std::max(m, std::hypot(d[i], d[n + i], d[2 * n + i]));
    for (auto& v : d) v *= max_norm / m;
    return t;
}

// Largest |p - q| over voxels at least `margin` away from every face.
double interior_gap(std::span<const double> p, std::span<const double> q, std::int64_t N, std::int64_t margin) {
    const auto n = N * N * N;
    double worst = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const auto i = static_cast<std::int64_t>(k) % n, z = i / (N * N), y = (i / N) % N, x = i % N;
        if (std::min({x, y, z}) < margin || std::max({x, y, z}) >= N - margin) continue;
        worst = std::max(worst, std::abs(p[k] - q[k]));
    }
    return worst;
}

} // namespace

TEST_CASE("identity_grid holds integer coordinates") {
    Tensor g = identity_grid({2, 2, 2});
    CHECK(g.shape() == Shape{3, 2, 2, 2});
    CHECK(g.data()[0] == 0.0);
    CHECK(g.data()[8] == 0.0);
    CHECK(g.data()[16] == 0.0);
    // voxel (z=1, y=0, x=1) is index 5
    CHECK(g.data()[5] == 1.0);
    CHECK(g.data()[8 + 5] == 0.0);
    CHECK(g.data()[16 + 5] == 1.0);
    for (double v : g.data()) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("warp: zero field, constant shift on a ramp, nearest on masks") {
    Tensor v = test::random_tensor({2, 6, 5, 4}, 1, -1, 1, false);
    Tensor same = warp(v, zero_field({6, 5, 4}));
    CHECK(test::max_abs_diff(same.data(), v.data()) == 0.0);

    std::vector<double> ramp(8 * 8 * 8);
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<double>(i % 8);
    Tensor r = warp(Tensor::from_data({1, 8, 8, 8}, ramp), constant_field({8, 8, 8}, 1.0, 0.0, 0.0));
    for (std::size_t i = 0; i < ramp.size(); ++i) {
        if (i % 8 < 7) CHECK(r.data()[i] == ramp[i] + 1.0);
    }

    std::vector<double> mask(8 * 8 * 8, 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 0) ? 1.0 : 0.0;
    Tensor m = Tensor::from_data({1, 8, 8, 8}, mask);
    Tensor mw = warp(m, constant_field({8, 8, 8}, 0.4, 0.0, 0.0), Interp::nearest);
    CHECK(test::max_abs_diff(mw.data(), m.data()) == 0.0);

    CHECK_THROWS_AS(warp(v, zero_field({6, 5, 5})), ShapeError);
}

TEST_CASE("compose: identities and translations") {
    const Shape s{8, 8, 8};
    DisplacementField f{with_max_norm(smooth_tensor({3, 8, 8, 8}, 2), 1.5)};
    CHECK(test::max_abs_diff(compose(zero_field(s), f).vectors.data(), f.vectors.data()) == 0.0);
    CHECK(test::max_abs_diff(compose(f, zero_field(s)).vectors.data(), f.vectors.data()) == 0.0);

    DisplacementField c = compose(constant_field(s, 1.0, -0.5, 0.25), constant_field(s, 0.5, 1.0, 0.5));
    const auto n = 512;
    for (int i = 0; i < n; ++i) {
        CHECK(c.vectors.data()[i] == 1.5);
        CHECK(c.vectors.data()[n + i] == 0.5);
        CHECK(c.vectors.data()[2 * n + i] == 0.75);
    }
    CHECK_THROWS_AS(compose(zero_field({8, 8, 8}), zero_field({8, 8, 4})), ShapeError);
}

TEST_CASE("compose: warping by the composition equals sequential warps") {
    // The two sides resample different intermediates (image vs field), so
    // they agree up to trilinear interpolation error: second order in the
    // spatial frequency, and below 1e-3 for fields spanning ~1/8 cycle.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::vector<double> gaps;
        for (double f : {1.0, 0.5, 0.25, 0.125}) {
            Tensor image = smooth_tensor({1, 16, 16, 16}, 100 + seed, 1.0, false, 0.5 * f, 1.5 * f);
            DisplacementField a{with_max_norm(smooth_tensor({3, 16, 16, 16}, 200 + seed, 1.0, false, 0.5 * f, 1.5 * f), 1.0)};
            DisplacementField b{with_max_norm(smooth_tensor({3, 16, 16, 16}, 300 + seed, 1.0, false, 0.5 * f, 1.5 * f), 1.0)};
            Tensor seq = warp(warp(image, a), b);
            Tensor once = warp(image, compose(a, b));
            gaps.push_back(interior_gap(seq.data(), once.data(), 16, 3));
        }
        CHECK(gaps[0] < 0.1);
        // two halvings would ideally shrink the gap 16x
        CHECK(gaps[2] < gaps[0] / 5.0);
        CHECK(gaps[3] < gaps[1] / 5.0);
        CHECK(gaps.back() < 1e-3);
    }
}

TEST_CASE("integrate_velocity: zero and constant velocities") {
    const Shape s{8, 8, 8};
    DisplacementField z = integrate_velocity({zero_field(s).vectors}, 7);
    for (double v : z.vectors.data()) CHECK(v == 0.0);

    DisplacementField c = integrate_velocity({constant_field(s, 1.5, 0.0, 0.0).vectors}, 7);
    for (int i = 0; i < 512; ++i) {
        CHECK(std::abs(c.vectors.data()[i] - 1.5) < 1e-9);
        CHECK(std::abs(c.vectors.data()[512 + i]) < 1e-9);
    }
    CHECK_THROWS(integrate_velocity({zero_field(s).vectors}, -1));
}

namespace {

using oracle::Grid;
using oracle::compose_with;

// Max abs difference between scaling and squaring and 128 sequential
// compositions of V / 128.
double sequential_gap(const Tensor& v, std::int64_t N, std::int64_t margin = 0) {
    const Grid psi = oracle::sequential_flow(Grid(v.data().begin(), v.data().end()), N, 128);
    const auto phi = integrate_velocity({v}, 7);
    return interior_gap(phi.vectors.data(), psi, N, margin);
}

} // namespace

TEST_CASE("integrate_velocity matches an independent scaling-and-squaring loop") {
    const std::int64_t N = 12;
    Tensor v = with_max_norm(smooth_tensor({3, N, N, N}, 400), 2.0);
    Grid psi(v.data().begin(), v.data().end());
    for (auto& x : psi) x /= 128.0;
    for (int step = 0; step < 7; ++step) psi = compose_with(psi, psi, N);
    CHECK(test::max_abs_diff(integrate_velocity({v}, 7).vectors.data(), psi) < 1e-12);
}

TEST_CASE("scaling and squaring tracks sequential composition up to interpolation error") {
    // Both schemes realize the same map in the continuum. Away from the
    // clamped faces the gap is trilinear resampling error and shrinks about
    // 4x per halving of frequency.
    const std::int64_t N = 24;
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        std::vector<double> gaps;
        for (double f : {1.0, 0.5, 0.25, 0.125}) {
            Tensor v = with_max_norm(smooth_tensor({3, N, N, N}, 410 + seed, 1.0, false, 0.5 * f, 1.5 * f), 2.0);
            gaps.push_back(sequential_gap(v, N, 4));
            if (f == 1.0) CHECK(smoothness_report(integrate_velocity({v}, 7)).folding_fraction == 0.0);
        }
        CHECK(gaps[0] < 0.05);
        CHECK(gaps[1] < gaps[0] / 2.5);
        CHECK(gaps[2] < gaps[1] / 2.5);
        CHECK(gaps[3] < 1e-3);
    }
}

TEST_CASE("upsample_field: unit rescaling and linear data") {
    DisplacementField c = upsample_field(constant_field({4, 4, 4}, 1.0, 0.0, 0.0), 2);
    CHECK(c.vectors.shape() == Shape{3, 8, 8, 8});
    for (int i = 0; i < 512; ++i) {
        CHECK(c.vectors.data()[i] == 2.0);
        CHECK(c.vectors.data()[512 + i] == 0.0);
    }
    VelocityField z = upsample_field(VelocityField{Tensor::zeros({3, 2, 3, 4})}, 4);
    CHECK(z.vectors.shape() == Shape{3, 8, 12, 16});
    for (double v : z.vectors.data()) CHECK(v == 0.0);

    // phi_x = 0.3 x + 0.2 on a 6^3 grid; on the doubled grid voxel o sits at
    // coarse coordinate (o + 0.5) / 2 - 0.5
    std::vector<double> lin(3 * 216, 0.0);
    for (int i = 0; i < 216; ++i) lin[i] = 0.3 * (i % 6) + 0.2;
    DisplacementField up = upsample_field(DisplacementField{Tensor::from_data({3, 6, 6, 6}, lin)}, 2);
    for (int i = 0; i < 12 * 12 * 12; ++i) {
        const int o = i % 12;
        if (o == 0 || o == 11) continue;
        const double coarse = (o + 0.5) / 2.0 - 0.5;
        CHECK(up.vectors.data()[i] == doctest::Approx(2.0 * (0.3 * coarse + 0.2)).epsilon(1e-14));
    }
    CHECK_THROWS(upsample_field(constant_field({4, 4, 4}, 0, 0, 0), 0));
    CHECK_THROWS(upsample_field(constant_field({4, 4, 4}, 0, 0, 0), 3));
}

TEST_CASE("apply_affine: closed form") {
    AffineParams id = AffineParams::identity();
    DisplacementField zero = apply_affine(id, {4, 4, 4});
    for (double v : zero.vectors.data()) CHECK(v == 0.0);
    CHECK(id.linear_determinant() == 1.0);

    AffineParams shift{Tensor::zeros({3, 3}), Tensor::from_data({3}, {1.0, 0.0, 0.0})};
    DisplacementField s = apply_affine(shift, {4, 4, 4});
    for (int i = 0; i < 64; ++i) CHECK(s.vectors.data()[i] == 1.0);

    std::vector<double> a(9, 0.0);
    a[0] = 0.5;
    DisplacementField f = apply_affine({Tensor::from_data({3, 3}, a), Tensor::zeros({3})}, {4, 4, 4});
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const int i = (z * 4 + y) * 4 + x;
                CHECK(f.vectors.data()[i] == 0.5 * x);
                CHECK(f.vectors.data()[64 + i] == 0.0);
                CHECK(f.vectors.data()[128 + i] == 0.0);
            }

    auto r = grad_check(
        [](std::span<const Tensor> in) { return apply_affine({in[0], in[1]}, {3, 4, 5}).vectors; },
        {test::random_tensor({3, 3}, 5), test::random_tensor({3}, 6)});
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("jacobian_map: identity, uniform expansion, folds, affine") {
    Tensor j0 = jacobian_map(zero_field({4, 5, 6}));
    for (double v : j0.data()) CHECK(v == 1.0);

    std::vector<double> a(9, 0.0);
    a[0] = a[4] = a[8] = 0.1;
    DisplacementField expand = apply_affine({Tensor::from_data({3, 3}, a), Tensor::zeros({3})}, {6, 6, 6});
    Tensor j1 = jacobian_map(expand);
    for (double v : j1.data()) CHECK(v == doctest::Approx(1.331).epsilon(1e-12));

    // swap x-slices 3 and 4: phi_x = +1 at x = 3, -1 at x = 4
    DisplacementField fold = zero_field({8, 8, 8});
    auto d = fold.vectors.mutable_data();
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y) {
            d[(z * 8 + y) * 8 + 3] = 1.0;
            d[(z * 8 + y) * 8 + 4] = -1.0;
        }
    Tensor j2 = jacobian_map(fold);
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                // forward difference at x = 3: 1 + (-1 - 1) = -1; neighbours 1 + 1 = 2
                const double expect = x == 3 ? -1.0 : (x == 2 || x == 4) ? 2.0 : 1.0;
                CHECK(j2.data()[(z * 8 + y) * 8 + x] == expect);
            }

    CHECK_THROWS_AS(jacobian_map(zero_field({1, 4, 4})), ShapeError);
}

TEST_CASE("jacobian of an affine field is det(A* + I)") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(9), t(3);
        for (auto& x : a) x = u(rng);
        for (auto& x : t) x = 10 * u(rng);
        AffineParams p{Tensor::from_data({3, 3}, a), Tensor::from_data({3}, t)};
        Tensor j = jacobian_map(apply_affine(p, {7, 6, 5}));
        for (double v : j.data()) CHECK(std::abs(v - p.linear_determinant()) < 1e-9);
    }
}

TEST_CASE("smoothness_report") {
    auto r0 = smoothness_report(zero_field({8, 8, 8}));
    CHECK(r0.jacobian_std == 0.0);
    CHECK(r0.folding_fraction == 0.0);

    std::vector<double> a(9, 0.0);
    a[0] = a[4] = a[8] = 0.1;
    auto r1 = smoothness_report(apply_affine({Tensor::from_data({3, 3}, a), Tensor::zeros({3})}, {8, 8, 8}));
    CHECK(r1.jacobian_std < 1e-12);
    CHECK(r1.folding_fraction == 0.0);

    // four voxels along x=3 -> x=4 swapped in isolation
    DisplacementField fold = zero_field({8, 8, 8});
    auto d = fold.vectors.mutable_data();
    for (auto [z, y] : std::array<std::pair<int, int>, 4>{{{1, 1}, {2, 5}, {6, 3}, {4, 4}}}) {
        d[(z * 8 + y) * 8 + 3] = 1.0;
        d[(z * 8 + y) * 8 + 4] = -1.0;
    }
    auto r2 = smoothness_report(fold);
    CHECK(r2.folding_fraction == 4.0 / 512.0);
    CHECK(r2.jacobian_std > 0.0);
}

TEST_CASE("integrated smooth velocities never fold") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor v = with_max_norm(smooth_tensor({3, 16, 16, 16}, 700 + seed), 2.0);
        CHECK(smoothness_report(integrate_velocity({v}, 7)).folding_fraction == 0.0);
    }
}

TEST_CASE("integrate_velocity is differentiable") {
    Tensor v = with_max_norm(smooth_tensor({3, 6, 6, 6}, 800), 1.0);
    v.set_requires_grad(true);
    auto r = grad_check([](std::span<const Tensor> in) { return integrate_velocity({in[0]}, 3).vectors; }, {v});
    CHECK(r.max_rel_error < 1e-3);
}
