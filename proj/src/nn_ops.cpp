#include "dreg/autograd.hpp"
#include "dreg/error.hpp"
#include "dreg/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace dreg {

using detail::Node;

Tensor instance_norm(const Tensor& input, double eps) {
    if (!input.defined() || input.rank() < 2) throw ShapeError("instance_norm: expected [C, ...], got rank < 2");
    if (!(eps > 0.0)) throw std::invalid_argument("instance_norm: eps must be positive");
    const std::int64_t channels = input.dim(0);
    const std::int64_t vox = input.numel() / std::max<std::int64_t>(channels, 1);
    const double* x = input.data().data();
    std::vector<double> out(input.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
        const double* xc = x + c * vox;
        double m = 0.0;
        for (std::int64_t i = 0; i < vox; ++i) m += xc[i];
        m /= static_cast<double>(vox);
        double var = 0.0;
        for (std::int64_t i = 0; i < vox; ++i) var += (xc[i] - m) * (xc[i] - m);
        var /= static_cast<double>(vox);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[c] = inv;
        double* yc = out.data() + c * vox;
        for (std::int64_t i = 0; i < vox; ++i) yc[i] = (xc[i] - m) * inv;
    }
    return detail::make_result(input.shape(), std::move(out), {input}, [inv_std, channels, vox](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const auto& kt = kernels::active();
        for (std::int64_t c = 0; c < channels; ++c) {
            const double* g = self.grad.data() + c * vox;
            const double* y = self.data.data() + c * vox;
            const double n = static_cast<double>(vox);
            const double mean_g = kt.sum(static_cast<std::size_t>(vox), g) / n;
            const double mean_gy = kt.dot(static_cast<std::size_t>(vox), g, y) / n;
            double* gc = gx + c * vox;
            for (std::int64_t i = 0; i < vox; ++i) gc[i] += inv_std[c] * (g[i] - mean_g - y[i] * mean_gy);
        }
    });
}

Tensor leaky_relu(const Tensor& input, double slope) {
    const auto& x = input.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
    return detail::make_result(input.shape(), std::move(out), {input}, [slope](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const auto& x = self.inputs[0]->data;
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] >= 0.0 ? self.grad[i] : slope * self.grad[i];
    });
}

Tensor sigmoid(const Tensor& input) {
    const auto& x = input.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        // split by sign so exp never overflows
        if (x[i] >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-x[i]));
        } else {
            const double e = std::exp(x[i]);
            out[i] = e / (1.0 + e);
        }
    }
    return detail::make_result(input.shape(), std::move(out), {input}, [](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            const double y = self.data[i];
            gx[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor softmax(const Tensor& input, std::size_t axis) {
    if (!input.defined() || axis >= input.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         (input.defined() ? to_string(input.shape()) : std::string("undefined")));
    }
    std::int64_t outer = 1, inner = 1;
    const std::int64_t n = input.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= input.dim(i);
    for (std::size_t i = axis + 1; i < input.rank(); ++i) inner *= input.dim(i);

    const double* x = input.data().data();
    std::vector<double> out(input.data().size());
    std::vector<double> mx(static_cast<std::size_t>(inner)), acc(static_cast<std::size_t>(inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* xo = x + o * n * inner;
        double* yo = out.data() + o * n * inner;
        std::copy_n(xo, inner, mx.begin());
        for (std::int64_t k = 1; k < n; ++k) {
            for (std::int64_t i = 0; i < inner; ++i) mx[i] = std::max(mx[i], xo[k * inner + i]);
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::int64_t k = 0; k < n; ++k) {
            for (std::int64_t i = 0; i < inner; ++i) {
                const double e = std::exp(xo[k * inner + i] - mx[i]);
                yo[k * inner + i] = e;
                acc[i] += e;
            }
        }
        for (std::int64_t k = 0; k < n; ++k) {
            for (std::int64_t i = 0; i < inner; ++i) yo[k * inner + i] /= acc[i];
        }
    }
    return detail::make_result(input.shape(), std::move(out), {input}, [outer, n, inner](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        std::vector<double> dotv(static_cast<std::size_t>(inner));
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* y = self.data.data() + o * n * inner;
            const double* g = self.grad.data() + o * n * inner;
            double* gxo = gx + o * n * inner;
            std::fill(dotv.begin(), dotv.end(), 0.0);
            for (std::int64_t k = 0; k < n; ++k) {
                for (std::int64_t i = 0; i < inner; ++i) dotv[i] += g[k * inner + i] * y[k * inner + i];
            }
            for (std::int64_t k = 0; k < n; ++k) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    gxo[k * inner + i] += y[k * inner + i] * (g[k * inner + i] - dotv[i]);
                }
            }
        }
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(input, 1, "linear input");
    detail::require_rank(weight, 2, "linear weight");
    const std::int64_t m = weight.dim(0), n = weight.dim(1);
    if (input.dim(0) != n) {
        throw ShapeError("linear: input " + to_string(input.shape()) + " vs weight " + to_string(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != m)) {
        throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
    }
    const double* x = input.data().data();
    const double* w = weight.data().data();
    std::vector<double> out(static_cast<std::size_t>(m));
    for (std::int64_t r = 0; r < m; ++r) {
        out[r] = kernels::active().dot(static_cast<std::size_t>(n), w + r * n, x) +
                 (bias.defined() ? bias.data()[r] : 0.0);
    }
    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result({m}, std::move(out), inputs, [m, n](Node& self) {
        const double* x = self.inputs[0]->data.data();
        const double* w = self.inputs[1]->data.data();
        const double* g = self.grad.data();
        const auto& kt = kernels::active();
        if (double* gx = self.input_grad(0)) {
            for (std::int64_t r = 0; r < m; ++r) kt.axpy(static_cast<std::size_t>(n), g[r], w + r * n, gx);
        }
        if (double* gw = self.input_grad(1)) {
            for (std::int64_t r = 0; r < m; ++r) kt.axpy(static_cast<std::size_t>(n), g[r], x, gw + r * n);
        }
        if (self.inputs.size() > 2) {
            if (double* gb = self.input_grad(2)) {
                for (std::int64_t r = 0; r < m; ++r) gb[r] += g[r];
            }
        }
    });
}

Tensor global_avg_pool(const Tensor& input) {
    if (!input.defined() || input.rank() < 2) throw ShapeError("global_avg_pool: expected [C, ...]");
    const std::int64_t channels = input.dim(0);
    const std::int64_t vox = input.numel() / std::max<std::int64_t>(channels, 1);
    std::vector<double> out(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
        out[c] = kernels::active().sum(static_cast<std::size_t>(vox), input.data().data() + c * vox) /
                 static_cast<double>(vox);
    }
    return detail::make_result({channels}, std::move(out), {input}, [channels, vox](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        for (std::int64_t c = 0; c < channels; ++c) {
            const double g = self.grad[c] / static_cast<double>(vox);
            double* gc = gx + c * vox;
            for (std::int64_t i = 0; i < vox; ++i) gc[i] += g;
        }
    });
}

} // namespace dreg
