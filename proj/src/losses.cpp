#include "dreg/losses.hpp"

#include "dreg/autograd.hpp"
#include "dreg/error.hpp"

#include <array>
#include <cmath>

namespace dreg {

using detail::Node;
using Mat3 = std::array<double, 9>;

namespace {

Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[3 * i + j] += a[3 * i + k] * b[3 * k + j];
    return r;
}

Mat3 transpose(const Mat3& a) {
    return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

// Cofactor matrix: d det(M) / dM.
Mat3 cofactor(const Mat3& m) {
    return {m[4] * m[8] - m[5] * m[7], m[5] * m[6] - m[3] * m[8], m[3] * m[7] - m[4] * m[6],
            m[2] * m[7] - m[1] * m[8], m[0] * m[8] - m[2] * m[6], m[1] * m[6] - m[0] * m[7],
            m[1] * m[5] - m[2] * m[4], m[2] * m[3] - m[0] * m[5], m[0] * m[4] - m[1] * m[3]};
}

Mat3 inverse(const Mat3& m, double det) {
    Mat3 r = transpose(cofactor(m));
    for (auto& v : r) v /= det;
    return r;
}

double trace(const Mat3& m) { return m[0] + m[4] + m[8]; }

Tensor scalar_result(double value, std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward) {
    return detail::make_result({}, {value}, inputs, std::move(backward));
}

} // namespace

void LossWeights::validate() const {
    for (double a : {alpha1, alpha2, alpha3, alpha4}) {
        if (!std::isfinite(a) || a < 0.0) throw std::invalid_argument("loss weights must be finite and >= 0");
    }
}

Tensor affine_loss(const Tensor& a_star) {
    detail::require_rank(a_star, 2, "affine_loss");
    if (a_star.dim(0) != 3 || a_star.dim(1) != 3) throw ShapeError("affine_loss: expected [3,3], got " + to_string(a_star.shape()));
    Mat3 m{};
    for (int i = 0; i < 9; ++i) m[i] = a_star.data()[i] + (i % 4 == 0 ? 1.0 : 0.0);
    const Mat3 s = matmul(transpose(m), m);
    const double det_s = det3(s);
    if (!(det_s >= 1e-12)) throw NumericalError("affine_loss: singular affine matrix (det(M^T M) = " + std::to_string(det_s) + ")");
    const Mat3 s_inv = inverse(s, det_s);
    const double det_m = det3(m);
    const double value = -6.0 + trace(s) + trace(s_inv) + (det_m - 1.0) * (det_m - 1.0);

    return scalar_result(value, {a_star}, [m, s_inv, det_m](Node& self) {
        double* ga = self.input_grad(0);
        if (!ga) return;
        // d tr(S) = 2M, d tr(S^-1) = -2 M S^-2, d (det - 1)^2 = 2 (det - 1) cof(M)
        const Mat3 ms2 = matmul(m, matmul(s_inv, s_inv));
        const Mat3 cof = cofactor(m);
        const double g = self.grad[0];
        for (int i = 0; i < 9; ++i) ga[i] += g * (2.0 * m[i] - 2.0 * ms2[i] + 2.0 * (det_m - 1.0) * cof[i]);
    });
}

Tensor smoothness_loss(const DisplacementField& field) {
    const Tensor& f = field.vectors;
    detail::require_rank(f, 4, "smoothness_loss");
    const std::int64_t C = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3);
    const std::int64_t n = D * H * W;
    const std::array<std::int64_t, 3> extent{W, H, D}, stride{1, W, H * W};
    const double* d = f.data().data();

    // visits every (i, i + stride) pair with a valid forward difference
    auto for_each_diff = [=](auto&& fn) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t z = 0; z < D; ++z)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x) {
                        const std::int64_t i = c * n + (z * H + y) * W + x;
                        const std::array<std::int64_t, 3> coord{x, y, z};
                        for (int a = 0; a < 3; ++a) {
                            if (coord[a] + 1 < extent[a]) fn(i, i + stride[a]);
                        }
                    }
        }
    };
    double total = 0.0;
    for_each_diff([&](std::int64_t i, std::int64_t j) { total += (d[j] - d[i]) * (d[j] - d[i]); });
    const double inv_n = 1.0 / static_cast<double>(n);

    return scalar_result(total * inv_n, {f}, [for_each_diff, inv_n](Node& self) {
        double* gf = self.input_grad(0);
        if (!gf) return;
        const double* d = self.inputs[0]->data.data();
        const double g = 2.0 * inv_n * self.grad[0];
        for_each_diff([&](std::int64_t i, std::int64_t j) {
            const double diff = g * (d[j] - d[i]);
            gf[j] += diff;
            gf[i] -= diff;
        });
    });
}

namespace {

constexpr double kPearsonEps = 1e-8;

struct Moments {
    double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0, r = 0, rho = 0;
};

// Centred sums over the elements listed by `each`, which calls back with a
// flat index for every element of the region.
template <class Each>
Moments moments(const double* x, const double* y, std::int64_t count, Each&& each) {
    Moments m;
    each([&](std::int64_t i) {
        m.mx += x[i];
        m.my += y[i];
    });
    m.mx /= static_cast<double>(count);
    m.my /= static_cast<double>(count);
    each([&](std::int64_t i) {
        const double dx = x[i] - m.mx, dy = y[i] - m.my;
        m.sxx += dx * dx;
        m.syy += dy * dy;
        m.sxy += dx * dy;
    });
    m.r = std::sqrt(m.sxx * m.syy + kPearsonEps);
    m.rho = m.sxy / m.r;
    return m;
}

// Accumulates coef * d rho / d x_i and d rho / d y_i over the region.
template <class Each>
void pearson_backward(const Moments& m, double coef, const double* x, const double* y, double* gx, double* gy,
                      Each&& each) {
    const double r3 = m.r * m.r * m.r;
    const double ax = coef / m.r, bx = coef * m.sxy * m.syy / r3;
    const double by = coef * m.sxy * m.sxx / r3;
    each([&](std::int64_t i) {
        const double dx = x[i] - m.mx, dy = y[i] - m.my;
        if (gx) gx[i] += ax * dy - bx * dx;
        if (gy) gy[i] += ax * dx - by * dy;
    });
}

} // namespace

Tensor pearson(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw ShapeError("pearson: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
    const std::int64_t n = x.numel();
    if (n == 0) throw ShapeError("pearson: empty input");
    auto each = [n](auto&& fn) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
    };
    const Moments m = moments(x.data().data(), y.data().data(), n, each);
    return scalar_result(m.rho, {x, y}, [m, each](Node& self) {
        pearson_backward(m, self.grad[0], self.inputs[0]->data.data(), self.inputs[1]->data.data(), self.input_grad(0),
                         self.input_grad(1), each);
    });
}

Tensor nlcc_loss(const Tensor& moved, const Tensor& fixed) {
    detail::require_rank(moved, 4, "nlcc_loss");
    if (moved.shape() != fixed.shape()) {
        throw ShapeError("nlcc_loss: " + to_string(moved.shape()) + " vs " + to_string(fixed.shape()));
    }
    const std::int64_t C = moved.dim(0), D = moved.dim(1), H = moved.dim(2), W = moved.dim(3);
    if (C < 1 || C > 2) throw ShapeError("nlcc_loss: expected 1 or 2 channels, got " + to_string(moved.shape()));
    if (D < kPatch || H < kPatch || W < kPatch) {
        throw ShapeError("nlcc_loss: extents must be >= 8, got " + to_string(moved.shape()));
    }
    auto starts = [](std::int64_t extent) {
        std::vector<std::int64_t> s;
        for (std::int64_t p = 0; p + kPatch <= extent; p += kPatchStride) s.push_back(p);
        return s;
    };
    const auto sz = starts(D), sy = starts(H), sx = starts(W);
    const std::int64_t n = D * H * W;
    const std::int64_t patches = static_cast<std::int64_t>(sz.size() * sy.size() * sx.size());

    struct Patch {
        std::int64_t origin;
        Moments m;
    };
    std::vector<Patch> list;
    list.reserve(static_cast<std::size_t>(C * patches));
    const double* xm = moved.data().data();
    const double* xf = fixed.data().data();
    double total = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        double channel = 0.0;
        for (auto z0 : sz)
            for (auto y0 : sy)
                for (auto x0 : sx) {
                    const std::int64_t origin = c * n + (z0 * H + y0) * W + x0;
                    auto each = [origin, H, W](auto&& fn) {
                        for (int z = 0; z < kPatch; ++z)
                            for (int y = 0; y < kPatch; ++y)
                                for (int x = 0; x < kPatch; ++x) fn(origin + (z * H + y) * W + x);
                    };
                    Moments m = moments(xm, xf, kPatch * kPatch * kPatch, each);
                    channel += m.rho * m.rho;
                    list.push_back({origin, m});
                }
        total -= channel / static_cast<double>(patches);
    }

    return scalar_result(total, {moved, fixed}, [list = std::move(list), patches, H, W](Node& self) {
        double* gm = self.input_grad(0);
        double* gf = self.input_grad(1);
        const double* xm = self.inputs[0]->data.data();
        const double* xf = self.inputs[1]->data.data();
        const double scale = -2.0 * self.grad[0] / static_cast<double>(patches);
        for (const auto& p : list) {
            auto each = [origin = p.origin, H, W](auto&& fn) {
                for (int z = 0; z < kPatch; ++z)
                    for (int y = 0; y < kPatch; ++y)
                        for (int x = 0; x < kPatch; ++x) fn(origin + (z * H + y) * W + x);
            };
            pearson_backward(p.m, scale * p.m.rho, xm, xf, gm, gf, each);
        }
    });
}

Tensor soft_dice_loss(const Tensor& warped_m, const Tensor& masks_f) {
    if (warped_m.shape() != masks_f.shape()) {
        throw ShapeError("dice_loss: masks " + to_string(warped_m.shape()) + " vs " + to_string(masks_f.shape()));
    }
    if (warped_m.rank() < 2) throw ShapeError("dice_loss: expected [C, ...], got " + to_string(warped_m.shape()));
    constexpr double eps = 1e-5;
    const std::int64_t C = warped_m.dim(0);
    const std::int64_t n = warped_m.numel() / C;
    const double* a = warped_m.data().data();
    const double* b = masks_f.data().data();
    std::vector<double> inter(static_cast<std::size_t>(C)), denom(static_cast<std::size_t>(C));
    double total = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        double ab = 0.0, sa = 0.0, sb = 0.0;
        for (std::int64_t i = c * n; i < (c + 1) * n; ++i) {
            ab += a[i] * b[i];
            sa += a[i];
            sb += b[i];
        }
        inter[c] = 2.0 * ab + eps;
        denom[c] = sa + sb + eps;
        total -= inter[c] / denom[c];
    }
    total /= static_cast<double>(C);

    return scalar_result(total, {warped_m, masks_f}, [inter, denom, C, n](Node& self) {
        const double* a = self.inputs[0]->data.data();
        const double* b = self.inputs[1]->data.data();
        double* ga = self.input_grad(0);
        double* gb = self.input_grad(1);
        const double g = -self.grad[0] / static_cast<double>(C);
        for (std::int64_t c = 0; c < C; ++c) {
            // d (I / S) = (2 other - I / S) / S
            const double ratio = inter[c] / denom[c];
            const double k = g / denom[c];
            for (std::int64_t i = c * n; i < (c + 1) * n; ++i) {
                if (ga) ga[i] += k * (2.0 * b[i] - ratio);
                if (gb) gb[i] += k * (2.0 * a[i] - ratio);
            }
        }
    });
}

Tensor dice_loss(const Tensor& masks_m, const Tensor& masks_f, const DisplacementField& phi_aff,
                 const DisplacementField& phi_def) {
    if (masks_m.rank() != 4 || masks_f.rank() != 4 || masks_m.dim(0) != masks_f.dim(0)) {
        throw ShapeError("dice_loss: channel mismatch " + to_string(masks_m.shape()) + " vs " + to_string(masks_f.shape()));
    }
    return soft_dice_loss(warp(warp(masks_m, phi_aff), phi_def), masks_f);
}

Tensor total_loss(const LossParts& parts, const LossWeights& weights) {
    weights.validate();
    Tensor t = add(add(mul_scalar(parts.aff, weights.alpha1), mul_scalar(parts.reg, weights.alpha2)),
                   mul_scalar(parts.sim, weights.alpha3));
    if (parts.seg) t = add(t, mul_scalar(*parts.seg, weights.alpha4));
    return t;
}

} // namespace dreg
