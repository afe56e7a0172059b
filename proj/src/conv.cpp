// 3D convolution and its transpose.
//
// Both layers are expressed through one index relation between a "wide" grid
// X and a "narrow" grid Y:  Y[o] <- W[k] * X[o * stride + k - padding]  per
// axis. A convolution reads X (input) and writes Y (output); the transposed
// convolution is the adjoint, scattering Y (its input) into X (its output).
// All three passes (forward, input gradient, weight gradient) unfold X into
// column chunks and hand the products to the kernel layer's GEMM.

#include "dreg/autograd.hpp"
#include "dreg/error.hpp"
#include "dreg/kernels.hpp"

#include <algorithm>
#include <vector>

namespace dreg {

using detail::Node;

namespace {

struct ConvGeometry {
    std::int64_t cx, dx, hx, wx; // wide grid
    std::int64_t cy, dy, hy, wy; // narrow grid
    std::int64_t k, stride, pad;
};

std::int64_t out_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return a <= 0 ? 0 : (a + b - 1) / b; }

// Column buffer for a chunk of narrow-grid rows: entry (tap, j) holds the
// wide-grid value paired with narrow voxel j through that tap, or zero in the
// padding. Taps are ordered (channel, kz, ky, kx) like the weight layout, so
// all three passes become GEMMs against the buffer.
class Columns {
public:
    explicit Columns(const ConvGeometry& g) : g_(g), taps_(g.cx * g.k * g.k * g.k) {
        const std::int64_t s = g.stride, p = g.pad;
        for (std::int64_t kx = 0; kx < g.k; ++kx) {
            const std::int64_t lo = std::min(g.wy, ceil_div(p - kx, s));
            const std::int64_t last = g.wx - 1 + p - kx;
            lo_.push_back(lo);
            hi_.push_back(std::max(lo, last < 0 ? 0 : std::min(g.wy, last / s + 1)));
        }
        // Whole narrow rows per chunk, about a million buffer entries.
        chunk_rows_ = std::max<std::int64_t>(1, (std::int64_t{1} << 20) / std::max<std::int64_t>(1, taps_ * g.wy));
    }

    std::int64_t taps() const { return taps_; }
    std::int64_t rows() const { return g_.dy * g_.hy; }
    std::int64_t chunk_rows() const { return chunk_rows_; }

    // buf[taps x n] for narrow rows [r0, r1), n = (r1 - r0) * wy.
    void gather(const double* x, std::int64_t r0, std::int64_t r1, double* buf) const {
        for_each_segment(r0, r1, [&](std::int64_t col, std::int64_t wrow, std::int64_t kx) {
            double* dst = buf + col;
            if (wrow < 0) {
                std::fill(dst, dst + g_.wy, 0.0);
                return;
            }
            const std::int64_t lo = lo_[kx], hi = hi_[kx];
            const double* src = x + wrow + lo * g_.stride + kx - g_.pad;
            std::fill(dst, dst + lo, 0.0);
            if (g_.stride == 1) {
                std::copy(src, src + (hi - lo), dst + lo);
            } else {
                for (std::int64_t o = lo; o < hi; ++o) dst[o] = src[(o - lo) * g_.stride];
            }
            std::fill(dst + hi, dst + g_.wy, 0.0);
        });
    }

    // x += buf scattered back onto the wide grid.
    void scatter(const double* buf, std::int64_t r0, std::int64_t r1, double* x) const {
        for_each_segment(r0, r1, [&](std::int64_t col, std::int64_t wrow, std::int64_t kx) {
            if (wrow < 0) return;
            const std::int64_t lo = lo_[kx], hi = hi_[kx];
            double* dst = x + wrow + lo * g_.stride + kx - g_.pad;
            const double* src = buf + col;
            for (std::int64_t o = lo; o < hi; ++o) dst[(o - lo) * g_.stride] += src[o];
        });
    }

private:
    // fn(buffer offset of the row segment, wide row offset or -1 in padding, kx)
    template <class Fn>
    void for_each_segment(std::int64_t r0, std::int64_t r1, Fn&& fn) const {
        const std::int64_t k = g_.k, s = g_.stride, p = g_.pad;
        const std::int64_t n = (r1 - r0) * g_.wy;
        std::int64_t tap = 0;
        for (std::int64_t cx = 0; cx < g_.cx; ++cx)
            for (std::int64_t kz = 0; kz < k; ++kz)
                for (std::int64_t ky = 0; ky < k; ++ky)
                    for (std::int64_t kx = 0; kx < k; ++kx, ++tap) {
                        for (std::int64_t r = r0; r < r1; ++r) {
                            const std::int64_t iz = (r / g_.hy) * s + kz - p, iy = (r % g_.hy) * s + ky - p;
                            const bool inside = iz >= 0 && iz < g_.dx && iy >= 0 && iy < g_.hx;
                            fn(tap * n + (r - r0) * g_.wy, inside ? ((cx * g_.dx + iz) * g_.hx + iy) * g_.wx : -1, kx);
                        }
                    }
    }

    ConvGeometry g_;
    std::int64_t taps_;
    std::int64_t chunk_rows_ = 1;
    std::vector<std::int64_t> lo_, hi_;
};

std::vector<double>& scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

// Runs fn(r0, r1, buf) over chunks of narrow rows; buf is a per-thread
// buffer the callback sizes for its chunk.
template <class Fn>
void for_each_chunk(const Columns& cols, Fn&& fn) {
    auto& buf = scratch();
    for (std::int64_t r0 = 0; r0 < cols.rows(); r0 += cols.chunk_rows()) {
        fn(r0, std::min(cols.rows(), r0 + cols.chunk_rows()), buf);
    }
}

// y += w * x  (narrow <- wide)
void gather_rows(const ConvGeometry& g, const double* w, const double* x, double* y) {
    const Columns cols(g);
    const auto& kt = kernels::active();
    const std::int64_t P = g.dy * g.hy * g.wy, K = cols.taps();
    for_each_chunk(cols, [&](std::int64_t r0, std::int64_t r1, std::vector<double>& buf) {
        const std::int64_t n = (r1 - r0) * g.wy;
        if (static_cast<std::int64_t>(buf.size()) < K * n) buf.resize(static_cast<std::size_t>(K * n));
        cols.gather(x, r0, r1, buf.data());
        kt.gemm(false, false, g.cy, n, K, w, K, buf.data(), n, y + r0 * g.wy, P);
    });
}

// x += w^T * y  (wide <- narrow)
void scatter_rows(const ConvGeometry& g, const double* w, const double* y, double* x) {
    const Columns cols(g);
    const auto& kt = kernels::active();
    const std::int64_t P = g.dy * g.hy * g.wy, K = cols.taps();
    for_each_chunk(cols, [&](std::int64_t r0, std::int64_t r1, std::vector<double>& buf) {
        const std::int64_t n = (r1 - r0) * g.wy;
        if (static_cast<std::int64_t>(buf.size()) < K * n) buf.resize(static_cast<std::size_t>(K * n));
        std::fill(buf.begin(), buf.begin() + K * n, 0.0);
        kt.gemm(true, false, K, n, g.cy, w, K, y + r0 * g.wy, P, buf.data(), n);
        cols.scatter(buf.data(), r0, r1, x);
    });
}

// gw += y * columns(x)^T
void correlate_rows(const ConvGeometry& g, const double* y, const double* x, double* gw) {
    const Columns cols(g);
    const auto& kt = kernels::active();
    const std::int64_t P = g.dy * g.hy * g.wy, K = cols.taps();
    for_each_chunk(cols, [&](std::int64_t r0, std::int64_t r1, std::vector<double>& buf) {
        const std::int64_t n = (r1 - r0) * g.wy;
        if (static_cast<std::int64_t>(buf.size()) < K * n) buf.resize(static_cast<std::size_t>(K * n));
        cols.gather(x, r0, r1, buf.data());
        kt.gemm(false, true, g.cy, K, n, y + r0 * g.wy, P, buf.data(), n, gw, K);
    });
}

void add_channel_bias(std::vector<double>& out, std::int64_t channels, const double* bias) {
    const std::int64_t vox = static_cast<std::int64_t>(out.size()) / channels;
    for (std::int64_t c = 0; c < channels; ++c) {
        std::fill(out.begin() + c * vox, out.begin() + (c + 1) * vox, bias[c]);
    }
}

void accumulate_bias_grad(const std::vector<double>& g, std::int64_t channels, double* gb) {
    const std::int64_t vox = static_cast<std::int64_t>(g.size()) / channels;
    for (std::int64_t c = 0; c < channels; ++c) {
        gb[c] += kernels::active().sum(static_cast<std::size_t>(vox), g.data() + c * vox);
    }
}

void check_bias(const Tensor& bias, std::int64_t channels, const char* what) {
    if (!bias.defined()) return;
    if (bias.rank() != 1 || bias.dim(0) != channels) {
        throw ShapeError(std::string(what) + ": bias shape " + to_string(bias.shape()) + " does not match " +
                         std::to_string(channels) + " output channels");
    }
}

} // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    detail::require_rank(input, 4, "conv3d input");
    detail::require_rank(weight, 5, "conv3d weight");
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    if (ws[1] != is[0]) {
        throw ShapeError("conv3d: input " + to_string(is) + " has " + std::to_string(is[0]) +
                         " channels but weight " + to_string(ws) + " expects " + std::to_string(ws[1]));
    }
    if (ws[2] != ws[3] || ws[2] != ws[4] || ws[2] % 2 == 0) {
        throw ShapeError("conv3d: kernel must be cubic with odd extent, weight " + to_string(ws));
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv3d: invalid stride/padding");
    check_bias(bias, ws[0], "conv3d");

    ConvGeometry g{is[0], is[1], is[2], is[3], ws[0], 0, 0, 0, ws[2], stride, padding};
    g.dy = out_extent(g.dx, g.k, stride, padding);
    g.hy = out_extent(g.hx, g.k, stride, padding);
    g.wy = out_extent(g.wx, g.k, stride, padding);
    if (g.dy <= 0 || g.hy <= 0 || g.wy <= 0) {
        throw ShapeError("conv3d: input " + to_string(is) + " too small for kernel " + to_string(ws));
    }

    Shape out_shape{g.cy, g.dy, g.hy, g.wy};
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)), 0.0);
    if (bias.defined()) add_channel_bias(out, g.cy, bias.data().data());
    gather_rows(g, weight.data().data(), input.data().data(), out.data());

    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(std::move(out_shape), std::move(out), inputs, [g](Node& self) {
        const double* x = self.inputs[0]->data.data();
        const double* w = self.inputs[1]->data.data();
        if (double* gx = self.input_grad(0)) scatter_rows(g, w, self.grad.data(), gx);
        if (double* gw = self.input_grad(1)) correlate_rows(g, self.grad.data(), x, gw);
        if (self.inputs.size() > 2) {
            if (double* gb = self.input_grad(2)) accumulate_bias_grad(self.grad, g.cy, gb);
        }
    });
}

Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(input, 4, "conv_transpose3d input");
    detail::require_rank(weight, 5, "conv_transpose3d weight");
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    if (is[1] == 0 || is[2] == 0 || is[3] == 0) {
        throw ShapeError("conv_transpose3d: empty input " + to_string(is));
    }
    if (ws[0] != is[0] || ws[2] != 4 || ws[3] != 4 || ws[4] != 4) {
        throw ShapeError("conv_transpose3d: input " + to_string(is) + " incompatible with weight " + to_string(ws) +
                         " (expected [C_in, C_out, 4, 4, 4])");
    }
    check_bias(bias, ws[1], "conv_transpose3d");

    // Narrow grid = this layer's input, wide grid = its output.
    ConvGeometry g{ws[1], 2 * is[1], 2 * is[2], 2 * is[3], is[0], is[1], is[2], is[3], 4, 2, 1};
    Shape out_shape{g.cx, g.dx, g.hx, g.wx};
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)), 0.0);
    if (bias.defined()) add_channel_bias(out, g.cx, bias.data().data());
    scatter_rows(g, weight.data().data(), input.data().data(), out.data());

    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(std::move(out_shape), std::move(out), inputs, [g](Node& self) {
        const double* y = self.inputs[0]->data.data();
        const double* w = self.inputs[1]->data.data();
        if (double* gy = self.input_grad(0)) gather_rows(g, w, self.grad.data(), gy);
        if (double* gw = self.input_grad(1)) correlate_rows(g, y, self.grad.data(), gw);
        if (self.inputs.size() > 2) {
            if (double* gb = self.input_grad(2)) accumulate_bias_grad(self.grad, g.cx, gb);
        }
    });
}

} // namespace dreg
