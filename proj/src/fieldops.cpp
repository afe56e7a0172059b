#include "dreg/fieldops.hpp"

#include "dreg/autograd.hpp"
#include "dreg/error.hpp"

#include <algorithm>
#include <cmath>

namespace dreg {

using detail::Node;

namespace {

void require_field(const Tensor& t, const char* what) {
    detail::require_rank(t, 4, what);
    if (t.dim(0) != 3) throw ShapeError(std::string(what) + ": expected 3 channels, got " + to_string(t.shape()));
}

Shape spatial_of(const Tensor& t) { return {t.dim(1), t.dim(2), t.dim(3)}; }

} // namespace

double det3(const std::array<double, 9>& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

AffineParams AffineParams::identity() { return {Tensor::zeros({3, 3}), Tensor::zeros({3})}; }

double AffineParams::linear_determinant() const {
    std::array<double, 9> m{};
    for (int i = 0; i < 9; ++i) m[i] = a_star.data()[i] + (i % 4 == 0 ? 1.0 : 0.0);
    return det3(m);
}

Tensor identity_grid(const Shape& spatial) {
    if (spatial.size() != 3) throw ShapeError("identity_grid: expected {D, H, W}, got " + to_string(spatial));
    const std::int64_t D = spatial[0], H = spatial[1], W = spatial[2];
    const std::int64_t n = D * H * W;
    std::vector<double> g(static_cast<std::size_t>(3 * n));
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                g[i] = static_cast<double>(x);
                g[n + i] = static_cast<double>(y);
                g[2 * n + i] = static_cast<double>(z);
            }
        }
    }
    return Tensor::from_data({3, D, H, W}, std::move(g));
}

DisplacementField zero_field(const Shape& spatial) {
    return {Tensor::zeros({3, spatial.at(0), spatial.at(1), spatial.at(2)})};
}

Tensor warp(const Tensor& volume, const DisplacementField& field, Interp interp) {
    detail::require_rank(volume, 4, "warp volume");
    require_field(field.vectors, "warp field");
    if (spatial_of(volume) != field.spatial()) {
        throw ShapeError("warp: volume " + to_string(volume.shape()) + " vs field " +
                         to_string(field.vectors.shape()));
    }
    if (interp == Interp::trilinear) {
        return grid_sample(volume, add(identity_grid(field.spatial()), field.vectors));
    }

    const std::int64_t C = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
    const std::int64_t n = D * H * W;
    const double* v = volume.data().data();
    const double* f = field.vectors.data().data();
    std::vector<double> out(static_cast<std::size_t>(C * n));
    auto nearest = [](double c, std::int64_t extent) {
        const auto r = static_cast<std::int64_t>(std::floor(c + 0.5));
        return std::clamp<std::int64_t>(r, 0, extent - 1);
    };
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                const std::int64_t sx = nearest(static_cast<double>(x) + f[i], W);
                const std::int64_t sy = nearest(static_cast<double>(y) + f[n + i], H);
                const std::int64_t sz = nearest(static_cast<double>(z) + f[2 * n + i], D);
                const std::int64_t src = (sz * H + sy) * W + sx;
                for (std::int64_t c = 0; c < C; ++c) out[c * n + i] = v[c * n + src];
            }
        }
    }
    return Tensor::from_data(volume.shape(), std::move(out));
}

DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner) {
    require_field(outer.vectors, "compose outer");
    require_field(inner.vectors, "compose inner");
    if (outer.vectors.shape() != inner.vectors.shape()) {
        throw ShapeError("compose: " + to_string(outer.vectors.shape()) + " vs " + to_string(inner.vectors.shape()));
    }
    return {add(inner.vectors, warp(outer.vectors, inner))};
}

DisplacementField integrate_velocity(const VelocityField& velocity, int t_steps) {
    require_field(velocity.vectors, "integrate_velocity");
    if (t_steps < 0) throw std::invalid_argument("integrate_velocity: t_steps must be >= 0");
    DisplacementField phi{mul_scalar(velocity.vectors, std::ldexp(1.0, -t_steps))};
    for (int i = 0; i < t_steps; ++i) phi = compose(phi, phi);
    return phi;
}

namespace {
Tensor upsample_vectors(const Tensor& vectors, int factor) {
    require_field(vectors, "upsample_field");
    if (factor < 1) throw std::invalid_argument("upsample_field: factor must be >= 1, got " + std::to_string(factor));
    if ((factor & (factor - 1)) != 0) {
        throw std::invalid_argument("upsample_field: factor must be a power of 2, got " + std::to_string(factor));
    }
    if (factor == 1) return vectors;
    return mul_scalar(upsample_linear(vectors, factor), static_cast<double>(factor));
}
} // namespace

VelocityField upsample_field(const VelocityField& field, int factor) {
    return {upsample_vectors(field.vectors, factor)};
}

DisplacementField upsample_field(const DisplacementField& field, int factor) {
    return {upsample_vectors(field.vectors, factor)};
}

DisplacementField apply_affine(const AffineParams& params, const Shape& spatial) {
    detail::require_rank(params.a_star, 2, "apply_affine A*");
    detail::require_rank(params.translation, 1, "apply_affine t");
    if (params.a_star.dim(0) != 3 || params.a_star.dim(1) != 3 || params.translation.dim(0) != 3) {
        throw ShapeError("apply_affine: expected A* [3,3] and t [3], got " + to_string(params.a_star.shape()) +
                         " and " + to_string(params.translation.shape()));
    }
    Tensor grid = identity_grid(spatial);
    const std::int64_t n = grid.numel() / 3;
    const double* a = params.a_star.data().data();
    const double* t = params.translation.data().data();
    const double* p = grid.data().data();
    std::vector<double> out(static_cast<std::size_t>(3 * n));
    for (int c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < n; ++i) {
            out[c * n + i] = a[3 * c] * p[i] + a[3 * c + 1] * p[n + i] + a[3 * c + 2] * p[2 * n + i] + t[c];
        }
    }
    return {detail::make_result(grid.shape(), std::move(out), {params.a_star, params.translation},
                                [grid, n](Node& self) {
                                    const double* p = grid.data().data();
                                    const double* g = self.grad.data();
                                    double* ga = self.input_grad(0);
                                    double* gt = self.input_grad(1);
                                    for (int c = 0; c < 3; ++c) {
                                        double s[4] = {0.0, 0.0, 0.0, 0.0};
                                        for (std::int64_t i = 0; i < n; ++i) {
                                            const double gi = g[c * n + i];
                                            s[0] += gi * p[i];
                                            s[1] += gi * p[n + i];
                                            s[2] += gi * p[2 * n + i];
                                            s[3] += gi;
                                        }
                                        if (ga) {
                                            for (int j = 0; j < 3; ++j) ga[3 * c + j] += s[j];
                                        }
                                        if (gt) gt[c] += s[3];
                                    }
                                })};
}

Tensor jacobian_map(const DisplacementField& field) {
    require_field(field.vectors, "jacobian_map");
    const std::int64_t D = field.vectors.dim(1), H = field.vectors.dim(2), W = field.vectors.dim(3);
    if (D < 2 || H < 2 || W < 2) throw ShapeError("jacobian_map: extents must be >= 2, got " + to_string(field.vectors.shape()));
    const std::int64_t n = D * H * W;
    const double* f = field.vectors.data().data();
    std::vector<double> out(static_cast<std::size_t>(n));
    // one-sided difference of channel c along axis (0 = x, 1 = y, 2 = z)
    auto diff = [&](int c, std::int64_t i, std::int64_t coord, std::int64_t extent, std::int64_t stride) {
        const double* fc = f + c * n;
        return coord + 1 < extent ? fc[i + stride] - fc[i] : fc[i] - fc[i - stride];
    };
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                std::array<double, 9> j{};
                for (int c = 0; c < 3; ++c) {
                    j[3 * c + 0] = diff(c, i, x, W, 1) + (c == 0 ? 1.0 : 0.0);
                    j[3 * c + 1] = diff(c, i, y, H, W) + (c == 1 ? 1.0 : 0.0);
                    j[3 * c + 2] = diff(c, i, z, D, H * W) + (c == 2 ? 1.0 : 0.0);
                }
                out[i] = det3(j);
            }
        }
    }
    return Tensor::from_data({1, D, H, W}, std::move(out));
}

SmoothnessReport smoothness_report(const DisplacementField& field) {
    const Tensor jac = jacobian_map(field);
    const auto d = jac.data();
    const double n = static_cast<double>(d.size());
    double m = 0.0;
    std::size_t folds = 0;
    for (double v : d) {
        m += v;
        if (v < 0.0) ++folds;
    }
    m /= n;
    double var = 0.0;
    for (double v : d) var += (v - m) * (v - m);
    return {std::sqrt(var / n), static_cast<double>(folds) / n};
}

} // namespace dreg
