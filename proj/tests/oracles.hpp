#pragma once

// Plain-loop re-computations of library results, written without any of the
// library's numerics so that agreement is evidence rather than tautology.

#include "dreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace dreg::oracle {

using Grid = std::vector<double>;

// Binary [D, H, W] mask from a predicate.
inline Tensor mask_from(std::int64_t D, std::int64_t H, std::int64_t W, const std::function<bool(int, int, int)>& in) {
    std::vector<double> v(static_cast<std::size_t>(D * H * W));
    std::size_t i = 0;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) v[i++] = in(z, y, x) ? 1.0 : 0.0;
    return Tensor::from_data({D, H, W}, std::move(v));
}

inline Tensor random_mask(std::int64_t D, std::int64_t H, std::int64_t W, std::uint64_t seed, double p) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(p);
    return mask_from(D, H, W, [&](int, int, int) { return b(rng); });
}

// Trilinear lookup of channel c of a [C, D, H, W] grid at (x, y, z), border
// clamped.
inline double lookup(const Grid& f, int c, std::int64_t D, std::int64_t H, std::int64_t W, double x, double y, double z) {
    auto clampc = [](double v, std::int64_t n) { return std::min(std::max(v, 0.0), static_cast<double>(n - 1)); };
    x = clampc(x, W);
    y = clampc(y, H);
    z = clampc(z, D);
    const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(x), W - 2);
    const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(y), H - 2);
    const auto z0 = std::min<std::int64_t>(static_cast<std::int64_t>(z), D - 2);
    const double fx = x - x0, fy = y - y0, fz = z - z0;
    auto at = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) { return f[((c * D + zz) * H + yy) * W + xx]; };
    double r = 0.0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int e = 0; e < 2; ++e)
                r += (a ? fz : 1 - fz) * (b ? fy : 1 - fy) * (e ? fx : 1 - fx) * at(z0 + a, y0 + b, x0 + e);
    return r;
}

// I(p + phi(p)) for a [C, D, H, W] image and a [3, D, H, W] field.
inline Grid warp(const Grid& image, std::int64_t C, const Grid& phi, std::int64_t D, std::int64_t H, std::int64_t W) {
    const auto n = D * H * W;
    Grid out(static_cast<std::size_t>(C * n));
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                const double px = x + phi[i], py = y + phi[n + i], pz = z + phi[2 * n + i];
                for (std::int64_t c = 0; c < C; ++c) out[c * n + i] = lookup(image, static_cast<int>(c), D, H, W, px, py, pz);
            }
    return out;
}

// psi <- psi + f(p + psi) on an N^3 grid.
inline Grid compose_with(const Grid& f, const Grid& psi, std::int64_t N) {
    const auto n = N * N * N;
    Grid next(psi.size());
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < N; ++z)
        for (std::int64_t y = 0; y < N; ++y)
            for (std::int64_t x = 0; x < N; ++x, ++i) {
                const double px = x + psi[i], py = y + psi[n + i], pz = z + psi[2 * n + i];
                for (int c = 0; c < 3; ++c) next[c * n + i] = psi[c * n + i] + lookup(f, c, N, N, N, px, py, pz);
            }
    return next;
}

// The flow of a stationary velocity by `steps` sequential compositions of
// V / steps.
inline Grid sequential_flow(const Grid& v, std::int64_t N, int steps) {
    Grid u(v);
    for (auto& x : u) x /= steps;
    Grid psi = u;
    for (int s = 1; s < steps; ++s) psi = compose_with(u, psi, N);
    return psi;
}

// A* for M = Rz(a) Ry(b) Rx(c).
inline std::vector<double> rotation_a_star(double a, double b, double c) {
    auto mul = [](const std::vector<double>& p, const std::vector<double>& q) {
        std::vector<double> r(9, 0.0);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) r[3 * i + j] += p[3 * i + k] * q[3 * k + j];
        return r;
    };
    const std::vector<double> rz{std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1};
    const std::vector<double> ry{std::cos(b), 0, std::sin(b), 0, 1, 0, -std::sin(b), 0, std::cos(b)};
    const std::vector<double> rx{1, 0, 0, 0, std::cos(c), -std::sin(c), 0, std::sin(c), std::cos(c)};
    auto m = mul(rz, mul(ry, rx));
    m[0] -= 1;
    m[4] -= 1;
    m[8] -= 1;
    return m;
}

// Patch loss: 8^3 windows at stride 3, -rho^2 averaged per channel, summed.
inline double nlcc(const Tensor& a, const Tensor& b) {
    const auto C = a.dim(0), D = a.dim(1), H = a.dim(2), W = a.dim(3);
    double total = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        int count = 0;
        for (std::int64_t z0 = 0; z0 + 8 <= D; z0 += 3)
            for (std::int64_t y0 = 0; y0 + 8 <= H; y0 += 3)
                for (std::int64_t x0 = 0; x0 + 8 <= W; x0 += 3) {
                    std::vector<double> p, q;
                    for (int z = 0; z < 8; ++z)
                        for (int y = 0; y < 8; ++y)
                            for (int x = 0; x < 8; ++x) {
                                const auto i = ((c * D + z0 + z) * H + y0 + y) * W + x0 + x;
                                p.push_back(a.data()[i]);
                                q.push_back(b.data()[i]);
                            }
                    double mp = 0, mq = 0;
                    for (int i = 0; i < 512; ++i) {
                        mp += p[i] / 512.0;
                        mq += q[i] / 512.0;
                    }
                    double spq = 0, spp = 0, sqq = 0;
                    for (int i = 0; i < 512; ++i) {
                        spq += (p[i] - mp) * (q[i] - mq);
                        spp += (p[i] - mp) * (p[i] - mp);
                        sqq += (q[i] - mq) * (q[i] - mq);
                    }
                    const double rho = spq / std::sqrt(spp * sqq + 1e-8);
                    acc += rho * rho;
                    ++count;
                }
        total -= acc / count;
    }
    return total;
}

// Squared forward differences of a [3, D, H, W] field, averaged over voxels.
inline double smoothness(const Tensor& f) {
    const auto D = f.dim(1), H = f.dim(2), W = f.dim(3);
    double s = 0.0;
    for (int ch = 0; ch < 3; ++ch)
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    auto at = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) {
                        return f.data()[((ch * D + zz) * H + yy) * W + xx];
                    };
                    if (x + 1 < W) s += std::pow(at(z, y, x + 1) - at(z, y, x), 2);
                    if (y + 1 < H) s += std::pow(at(z, y + 1, x) - at(z, y, x), 2);
                    if (z + 1 < D) s += std::pow(at(z + 1, y, x) - at(z, y, x), 2);
                }
    return s / static_cast<double>(D * H * W);
}

// Soft Dice loss of moving masks warped by phi_aff, then by phi_def.
inline double dice_loss(const Tensor& masks_m, const Tensor& masks_f, const Tensor& phi_aff, const Tensor& phi_def) {
    const auto C = masks_m.dim(0), D = masks_m.dim(1), H = masks_m.dim(2), W = masks_m.dim(3);
    const Grid m(masks_m.data().begin(), masks_m.data().end());
    const Grid aff(phi_aff.data().begin(), phi_aff.data().end()), def(phi_def.data().begin(), phi_def.data().end());
    const Grid warped = warp(warp(m, C, aff, D, H, W), C, def, D, H, W);
    const auto n = D * H * W;
    double total = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        double ab = 0, sa = 0, sb = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double a = warped[c * n + i], b = masks_f.data()[c * n + i];
            ab += a * b;
            sa += a;
            sb += b;
        }
        total += (2 * ab + 1e-5) / (sa + sb + 1e-5);
    }
    return -total / static_cast<double>(C);
}

// 2|A & B| / (|A| + |B|) over [D, H, W] masks; 1 when both are empty.
inline double dice(const Tensor& a, const Tensor& b) {
    double inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const bool x = a.data()[i] > 0.5, y = b.data()[i] > 0.5;
        inter += x && y;
        sa += x;
        sb += y;
    }
    return sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
}

struct Voxel {
    int z, y, x;
};

// Mask voxels with a 6-neighbour outside the mask or outside the grid.
inline std::vector<Voxel> surface(const Tensor& m) {
    const int D = static_cast<int>(m.dim(0)), H = static_cast<int>(m.dim(1)), W = static_cast<int>(m.dim(2));
    auto at = [&](int z, int y, int x) {
        if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) return false;
        return m.data()[(z * H + y) * W + x] > 0.5;
    };
    std::vector<Voxel> s;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!at(z, y, x)) continue;
                const bool on_grid_edge = z == 0 || y == 0 || x == 0 || z == D - 1 || y == H - 1 || x == W - 1;
                if (on_grid_edge || !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
                    !at(z, y, x - 1) || !at(z, y, x + 1)) {
                    s.push_back({z, y, x});
                }
            }
    return s;
}

inline double nearest(const Voxel& a, const std::vector<Voxel>& b) {
    double best = INFINITY;
    for (const auto& v : b) {
        const double dz = a.z - v.z, dy = a.y - v.y, dx = a.x - v.x;
        best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return best;
}

// Directed Hausdorff distance from the surface of a to that of b.
inline double hausdorff(const Tensor& a, const Tensor& b) {
    const auto sa = surface(a), sb = surface(b);
    double m = 0.0;
    for (const auto& v : sa) m = std::max(m, nearest(v, sb));
    return m;
}

inline double assd(const Tensor& a, const Tensor& b) {
    const auto sa = surface(a), sb = surface(b);
    double ab = 0.0, ba = 0.0;
    for (const auto& v : sa) ab += nearest(v, sb);
    for (const auto& v : sb) ba += nearest(v, sa);
    return (ab + ba) / static_cast<double>(sa.size() + sb.size());
}

} // namespace dreg::oracle
