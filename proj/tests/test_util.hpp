#pragma once

#include "dreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace dreg::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = u(rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Sum of a few low-frequency sinusoids sampled on a [C, D, H, W] grid. Each
// term completes between `lo` and `hi` periods across each axis.
inline Tensor smooth_tensor(Shape shape, std::uint64_t seed, double amplitude = 1.0, bool requires_grad = false,
                            double lo = 0.5, double hi = 1.5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto C = shape[0], D = shape[1], H = shape[2], W = shape[3];
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        for (int term = 0; term < 3; ++term) {
            const double a = amplitude * (u(rng) - 0.5) * 2.0 / 3.0;
            const double kx = 2.0 * 3.14159265358979 * (lo + (hi - lo) * u(rng)) / static_cast<double>(W);
            const double ky = 2.0 * 3.14159265358979 * (lo + (hi - lo) * u(rng)) / static_cast<double>(H);
            const double kz = 2.0 * 3.14159265358979 * (lo + (hi - lo) * u(rng)) / static_cast<double>(D);
            const double ph = 6.28318530717958 * u(rng);
            std::int64_t i = c * D * H * W;
            for (std::int64_t z = 0; z < D; ++z)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x, ++i)
                        v[i] += a * std::sin(kx * x + ky * y + kz * z + ph);
        }
    }
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Infinite when the shapes differ.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    return max_abs_diff(a.data(), b.data());
}

} // namespace dreg::test
