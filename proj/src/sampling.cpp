#include "dreg/autograd.hpp"
#include "dreg/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace dreg {

using detail::Node;

namespace {

// Two-tap linear interpolation along one axis.
struct AxisTaps {
    std::int64_t i0 = 0, i1 = 0;
    double frac = 0.0;
    bool valid0 = true, valid1 = true;
    // d(sampled coordinate)/d(requested coordinate): 0 where clamping is active.
    double slope = 1.0;
};

AxisTaps axis_taps(double c, std::int64_t n, Boundary boundary) {
    AxisTaps t;
    if (boundary == Boundary::clamp) {
        const double hi = static_cast<double>(n - 1);
        if (c < 0.0 || c > hi) t.slope = 0.0;
        const double cc = std::clamp(c, 0.0, hi);
        std::int64_t i0 = static_cast<std::int64_t>(std::floor(cc));
        if (i0 >= n - 1) i0 = std::max<std::int64_t>(n - 2, 0);
        t.i0 = i0;
        t.i1 = std::min(i0 + 1, n - 1);
        t.frac = cc - static_cast<double>(i0);
        return t;
    }
    const double f = std::floor(c);
    t.i0 = static_cast<std::int64_t>(f);
    t.i1 = t.i0 + 1;
    t.frac = c - f;
    t.valid0 = t.i0 >= 0 && t.i0 < n;
    t.valid1 = t.i1 >= 0 && t.i1 < n;
    t.i0 = std::clamp<std::int64_t>(t.i0, 0, n - 1);
    t.i1 = std::clamp<std::int64_t>(t.i1, 0, n - 1);
    return t;
}

struct Corners {
    std::array<std::int64_t, 8> offset{};
    std::array<double, 8> weight{};
    // partial derivatives of each corner weight with respect to x, y, z
    std::array<std::array<double, 8>, 3> dweight{};
};

Corners corners(const AxisTaps& tx, const AxisTaps& ty, const AxisTaps& tz, std::int64_t h, std::int64_t w) {
    Corners c;
    const double wx[2] = {1.0 - tx.frac, tx.frac};
    const double wy[2] = {1.0 - ty.frac, ty.frac};
    const double wz[2] = {1.0 - tz.frac, tz.frac};
    const double dx[2] = {-tx.slope, tx.slope};
    const double dy[2] = {-ty.slope, ty.slope};
    const double dz[2] = {-tz.slope, tz.slope};
    const std::int64_t ix[2] = {tx.i0, tx.i1}, iy[2] = {ty.i0, ty.i1}, iz[2] = {tz.i0, tz.i1};
    const bool vx[2] = {tx.valid0, tx.valid1}, vy[2] = {ty.valid0, ty.valid1}, vz[2] = {tz.valid0, tz.valid1};
    int k = 0;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            for (int e = 0; e < 2; ++e, ++k) {
                c.offset[k] = (iz[a] * h + iy[b]) * w + ix[e];
                const bool valid = vz[a] && vy[b] && vx[e];
                c.weight[k] = valid ? wz[a] * wy[b] * wx[e] : 0.0;
                c.dweight[0][k] = valid ? wz[a] * wy[b] * dx[e] : 0.0;
                c.dweight[1][k] = valid ? wz[a] * dy[b] * wx[e] : 0.0;
                c.dweight[2][k] = valid ? dz[a] * wy[b] * wx[e] : 0.0;
            }
        }
    }
    return c;
}

// Linear resize of one spatial axis (1..3 of a [C, D, H, W] tensor).
Tensor resize_axis(const Tensor& input, std::size_t axis, int factor) {
    const Shape& s = input.shape();
    const std::int64_t n = s[axis];
    const std::int64_t m = n * factor;
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<std::int64_t> lo(static_cast<std::size_t>(m)), hi(static_cast<std::size_t>(m));
    std::vector<double> t(static_cast<std::size_t>(m));
    for (std::int64_t o = 0; o < m; ++o) {
        double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(n - 1));
        const auto i0 = static_cast<std::int64_t>(std::floor(src));
        lo[o] = i0;
        hi[o] = std::min(i0 + 1, n - 1);
        t[o] = src - static_cast<double>(i0);
    }

    Shape out_shape = s;
    out_shape[axis] = m;
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    const double* x = input.data().data();
    for (std::int64_t a = 0; a < outer; ++a) {
        for (std::int64_t o = 0; o < m; ++o) {
            const double* r0 = x + (a * n + lo[o]) * inner;
            const double* r1 = x + (a * n + hi[o]) * inner;
            double* y = out.data() + (a * m + o) * inner;
            const double w1 = t[o], w0 = 1.0 - t[o];
            for (std::int64_t i = 0; i < inner; ++i) y[i] = w0 * r0[i] + w1 * r1[i];
        }
    }
    return detail::make_result(std::move(out_shape), std::move(out), {input},
                               [lo, hi, t, outer, n, m, inner](Node& self) {
                                   double* gx = self.input_grad(0);
                                   if (!gx) return;
                                   for (std::int64_t a = 0; a < outer; ++a) {
                                       for (std::int64_t o = 0; o < m; ++o) {
                                           const double* g = self.grad.data() + (a * m + o) * inner;
                                           double* r0 = gx + (a * n + lo[o]) * inner;
                                           double* r1 = gx + (a * n + hi[o]) * inner;
                                           const double w1 = t[o], w0 = 1.0 - t[o];
                                           for (std::int64_t i = 0; i < inner; ++i) {
                                               r0[i] += w0 * g[i];
                                               r1[i] += w1 * g[i];
                                           }
                                       }
                                   }
                               });
}

} // namespace

Tensor grid_sample(const Tensor& volume, const Tensor& locations, Boundary boundary) {
    detail::require_rank(volume, 4, "grid_sample volume");
    detail::require_rank(locations, 4, "grid_sample locations");
    if (locations.dim(0) != 3) {
        throw ShapeError("grid_sample: locations must have 3 channels, got " + to_string(locations.shape()));
    }
    const std::int64_t C = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
    if (D == 0 || H == 0 || W == 0) throw ShapeError("grid_sample: empty volume " + to_string(volume.shape()));
    const std::int64_t out_vox = locations.dim(1) * locations.dim(2) * locations.dim(3);
    const std::int64_t in_vox = D * H * W;

    const double* v = volume.data().data();
    const double* loc = locations.data().data();
    Shape out_shape{C, locations.dim(1), locations.dim(2), locations.dim(3)};
    std::vector<double> out(static_cast<std::size_t>(C * out_vox));
    for (std::int64_t o = 0; o < out_vox; ++o) {
        const Corners cn = corners(axis_taps(loc[o], W, boundary), axis_taps(loc[out_vox + o], H, boundary),
                                   axis_taps(loc[2 * out_vox + o], D, boundary), H, W);
        for (std::int64_t c = 0; c < C; ++c) {
            const double* vc = v + c * in_vox;
            double acc = 0.0;
            for (int k = 0; k < 8; ++k) acc += cn.weight[k] * vc[cn.offset[k]];
            out[c * out_vox + o] = acc;
        }
    }
    return detail::make_result(
        std::move(out_shape), std::move(out), {volume, locations},
        [C, D, H, W, out_vox, in_vox, boundary](Node& self) {
            const double* v = self.inputs[0]->data.data();
            const double* loc = self.inputs[1]->data.data();
            double* gv = self.input_grad(0);
            double* gl = self.input_grad(1);
            const double* g = self.grad.data();
            for (std::int64_t o = 0; o < out_vox; ++o) {
                const Corners cn = corners(axis_taps(loc[o], W, boundary), axis_taps(loc[out_vox + o], H, boundary),
                                           axis_taps(loc[2 * out_vox + o], D, boundary), H, W);
                double dl[3] = {0.0, 0.0, 0.0};
                for (std::int64_t c = 0; c < C; ++c) {
                    const double go = g[c * out_vox + o];
                    if (go == 0.0) continue;
                    if (gv) {
                        double* gvc = gv + c * in_vox;
                        for (int k = 0; k < 8; ++k) gvc[cn.offset[k]] += cn.weight[k] * go;
                    }
                    if (gl) {
                        const double* vc = v + c * in_vox;
                        for (int a = 0; a < 3; ++a) {
                            double acc = 0.0;
                            for (int k = 0; k < 8; ++k) acc += cn.dweight[a][k] * vc[cn.offset[k]];
                            dl[a] += go * acc;
                        }
                    }
                }
                if (gl) {
                    gl[o] += dl[0];
                    gl[out_vox + o] += dl[1];
                    gl[2 * out_vox + o] += dl[2];
                }
            }
        });
}

Tensor upsample_linear(const Tensor& input, int factor) {
    detail::require_rank(input, 4, "upsample_linear");
    if (factor < 1) throw std::invalid_argument("upsample_linear: factor must be >= 1, got " + std::to_string(factor));
    if (factor == 1) return input;
    Tensor t = resize_axis(input, 3, factor);
    t = resize_axis(t, 2, factor);
    return resize_axis(t, 1, factor);
}

} // namespace dreg
