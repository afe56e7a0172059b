#include "dreg/gradcheck.hpp"

#include "dreg/autograd.hpp"
#include "dreg/fieldops.hpp"
#include "dreg/losses.hpp"
#include "dreg/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace dreg {

namespace {

struct Case {
    std::string name;
    double tolerance;
    // Builds inputs from the case seed; `tap` wraps the checked output.
    std::function<GradCheckResult(std::uint64_t seed, const std::function<Tensor(Tensor)>& tap)> body;
};

// Values uniform in [lo, hi).
Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) x = u(rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Magnitudes in [lo, hi) with random signs: keeps inputs off kinks at zero.
Tensor off_zero(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t = uniform(std::move(shape), rng, lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (double& x : t.mutable_data()) x = sign(rng) ? x : -x;
    return t;
}

// Low-frequency field of peak amplitude about `amp`.
Tensor smooth(Shape shape, std::mt19937_64& rng, double amp, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto C = shape[0], D = shape[1], H = shape[2], W = shape[3];
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), 0.0);
    constexpr double two_pi = 6.283185307179586;
    for (std::int64_t c = 0; c < C; ++c) {
        for (int term = 0; term < 2; ++term) {
            const double a = amp * (u(rng) - 0.5);
            const double kx = two_pi * (0.5 + u(rng)) / static_cast<double>(W);
            const double ky = two_pi * (0.5 + u(rng)) / static_cast<double>(H);
            const double kz = two_pi * (0.5 + u(rng)) / static_cast<double>(D);
            const double ph = two_pi * u(rng);
            std::size_t i = static_cast<std::size_t>(c * D * H * W);
            for (std::int64_t z = 0; z < D; ++z)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x, ++i)
                        v[i] += a * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) +
                                             kz * static_cast<double>(z) + ph);
        }
    }
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Identity forward with a backward pass that overstates the gradient.
Tensor broken_identity(const Tensor& x) {
    return detail::make_result(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), {x}, [](detail::Node& self) {
        if (double* g = self.input_grad(0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 1.5 * self.grad[i];
        }
    });
}

// Smooth ops use the fourth-order stencil; piecewise-smooth ones take a
// small step so that few probes straddle a kink.
GradCheckOptions opts(std::uint64_t seed, bool kinks = false, std::size_t coords = 64) {
    GradCheckOptions o;
    o.seed = seed;
    if (!kinks) {
        o.step = 1e-3;
        o.five_point = true;
    }
    if (kinks) o.step = 1e-6;
    o.max_coords = coords;
    o.kink_tolerant = kinks;
    return o;
}

using Tap = std::function<Tensor(Tensor)>;

Case unary(std::string name, std::function<Tensor(const Tensor&)> op, double lo, double hi, bool signs = false) {
    return {name, kOpTolerance, [op, lo, hi, signs](std::uint64_t seed, const Tap& tap) {
                std::mt19937_64 rng(seed);
                Tensor x = signs ? off_zero({2, 3, 4, 5}, rng, lo, hi) : uniform({2, 3, 4, 5}, rng, lo, hi);
                return grad_check([&](std::span<const Tensor> in) { return tap(op(in[0])); }, {x}, opts(seed));
            }};
}

Case binary(std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, Shape sa, Shape sb, double lo,
            double hi) {
    return {name, kOpTolerance, [op, sa, sb, lo, hi](std::uint64_t seed, const Tap& tap) {
                std::mt19937_64 rng(seed);
                Tensor a = uniform(sa, rng, -1.0, 1.0), b = uniform(sb, rng, lo, hi);
                return grad_check([&](std::span<const Tensor> in) { return tap(op(in[0], in[1])); }, {a, b}, opts(seed));
            }};
}

// Pushes the randomly initialized heads and biases off the values that put
// samples on trilinear cells' faces and activations on the leaky-ReLU kink.
void unpin(RegistrationNet& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.02, 0.02);
    for (auto& [name, t] : net.params()) {
        if (name.find("head") != std::string::npos || name.ends_with(".b")) {
            for (double& v : t.mutable_data()) v = u(rng);
        }
    }
}

std::vector<Case> make_cases() {
    std::vector<Case> cs;
    const Shape s{2, 3, 4, 5};
    cs.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, s, s, -1, 1));
    cs.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, s, s, -1, 1));
    cs.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, s, s, -1, 1));
    cs.push_back(binary("mul_broadcast", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {2, 3, 4, 1}, {2, 1, 4, 5},
                        -1, 1));
    cs.push_back(binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, s, s, 0.5, 2.0));
    cs.push_back(unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.75); }, -1, 1));
    cs.push_back(unary("mul_scalar", [](const Tensor& x) { return mul_scalar(x, -1.25); }, -1, 1));
    cs.push_back(unary("square", [](const Tensor& x) { return square(x); }, -1, 1));
    cs.push_back(unary("sqrt", [](const Tensor& x) { return sqrt(x); }, 0.5, 2.0));
    cs.push_back(unary("sum", [](const Tensor& x) { return sum(x); }, -1, 1));
    cs.push_back(unary("mean", [](const Tensor& x) { return mean(x); }, -1, 1));
    cs.push_back(unary("reshape", [](const Tensor& x) { return reshape(x, {6, 20}); }, -1, 1));
    cs.push_back(unary("slice", [](const Tensor& x) { return slice(x, 1, 2); }, -1, 1));
    cs.push_back(unary("leaky_relu", [](const Tensor& x) { return leaky_relu(x, 0.1); }, 0.05, 1.0, true));
    cs.push_back(unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -3, 3));
    cs.push_back(unary("softmax", [](const Tensor& x) { return softmax(x, 0); }, -2, 2));
    cs.push_back(unary("instance_norm", [](const Tensor& x) { return instance_norm(x); }, -1, 1));
    cs.push_back(unary("global_avg_pool", [](const Tensor& x) { return global_avg_pool(x); }, -1, 1));
    cs.push_back(unary("upsample_linear", [](const Tensor& x) { return upsample_linear(x, 2); }, -1, 1));
    cs.push_back({"concat", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor a = uniform({2, 3, 4}, rng, -1, 1), b = uniform({2, 1, 4}, rng, -1, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(concat({in[0], in[1]}, 1)); }, {a, b},
                                        opts(seed));
                  }});
    cs.push_back({"linear", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor x = uniform({6}, rng, -1, 1), w = uniform({4, 6}, rng, -1, 1), b = uniform({4}, rng, -1, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(linear(in[0], in[1], in[2])); }, {x, w, b},
                                        opts(seed));
                  }});
    for (int stride : {1, 2}) {
        cs.push_back({"conv3d_stride" + std::to_string(stride), kOpTolerance, [stride](std::uint64_t seed, const Tap& tap) {
                          std::mt19937_64 rng(seed);
                          Tensor x = uniform({2, 6, 6, 6}, rng, -1, 1), w = uniform({3, 2, 3, 3, 3}, rng, -0.5, 0.5),
                                 b = uniform({3}, rng, -1, 1);
                          return grad_check(
                              [&](std::span<const Tensor> in) { return tap(conv3d(in[0], in[1], in[2], stride, 1)); }, {x, w, b},
                              opts(seed));
                      }});
    }
    cs.push_back({"conv_transpose3d", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor x = uniform({2, 3, 3, 3}, rng, -1, 1), w = uniform({2, 3, 4, 4, 4}, rng, -0.5, 0.5),
                             b = uniform({3}, rng, -1, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(conv_transpose3d(in[0], in[1], in[2])); },
                                        {x, w, b}, opts(seed));
                  }});
    cs.push_back({"upsample_field", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor v = uniform({3, 3, 3, 3}, rng, -1, 1);
                      return grad_check(
                          [&](std::span<const Tensor> in) { return tap(upsample_field(VelocityField{in[0]}, 2).vectors); }, {v},
                          opts(seed));
                  }});
    cs.push_back({"apply_affine", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor a = uniform({3, 3}, rng, -0.2, 0.2), t = uniform({3}, rng, -1, 1);
                      return grad_check(
                          [&](std::span<const Tensor> in) {
                              return tap(apply_affine(AffineParams{in[0], in[1]}, {4, 5, 6}).vectors);
                          },
                          {a, t}, opts(seed));
                  }});
    cs.push_back({"affine_loss", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor a = uniform({3, 3}, rng, -0.3, 0.3);
                      return grad_check([&](std::span<const Tensor> in) { return tap(affine_loss(in[0])); }, {a}, opts(seed));
                  }});
    cs.push_back({"smoothness_loss", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor f = uniform({3, 4, 5, 6}, rng, -1, 1);
                      return grad_check(
                          [&](std::span<const Tensor> in) { return tap(smoothness_loss(DisplacementField{in[0]})); }, {f},
                          opts(seed));
                  }});
    cs.push_back({"pearson", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor x = uniform({1, 4, 4, 4}, rng, 0, 1), y = uniform({1, 4, 4, 4}, rng, 0, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(pearson(in[0], in[1])); }, {x, y},
                                        opts(seed));
                  }});
    cs.push_back({"nlcc_loss", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor m = uniform({2, 11, 11, 11}, rng, 0, 1), f = uniform({2, 11, 11, 11}, rng, 0, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(nlcc_loss(in[0], in[1])); }, {m, f},
                                        opts(seed));
                  }});
    cs.push_back({"soft_dice_loss", kOpTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor a = uniform({2, 4, 4, 4}, rng, 0, 1), b = uniform({2, 4, 4, 4}, rng, 0, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(soft_dice_loss(in[0], in[1])); }, {a, b},
                                        opts(seed));
                  }});

    // Trilinear sampling and everything built on it.
    cs.push_back({"grid_sample", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor vol = uniform({2, 5, 6, 7}, rng, -1, 1);
                      Tensor loc = uniform({3, 3, 4, 5}, rng, 0.0, 1.0);
                      auto l = loc.mutable_data();
                      const double ext[3] = {7, 6, 5};
                      const std::size_t per = l.size() / 3;
                      for (std::size_t i = 0; i < l.size(); ++i) l[i] = l[i] * (ext[i / per] - 1.0);
                      return grad_check([&](std::span<const Tensor> in) { return tap(grid_sample(in[0], in[1])); }, {vol, loc},
                                        opts(seed, true));
                  }});
    cs.push_back({"warp", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor img = smooth({1, 6, 6, 6}, rng, 2.0), phi = smooth({3, 6, 6, 6}, rng, 3.0);
                      return grad_check([&](std::span<const Tensor> in) { return tap(warp(in[0], DisplacementField{in[1]})); },
                                        {img, phi}, opts(seed, true));
                  }});
    cs.push_back({"compose", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor a = smooth({3, 6, 6, 6}, rng, 3.0), b = smooth({3, 6, 6, 6}, rng, 3.0);
                      return grad_check(
                          [&](std::span<const Tensor> in) {
                              return tap(compose(DisplacementField{in[0]}, DisplacementField{in[1]}).vectors);
                          },
                          {a, b}, opts(seed, true));
                  }});
    cs.push_back({"integrate_velocity", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor v = smooth({3, 6, 6, 6}, rng, 4.0);
                      return grad_check(
                          [&](std::span<const Tensor> in) { return tap(integrate_velocity(VelocityField{in[0]}, 7).vectors); }, {v},
                          opts(seed, true));
                  }});
    cs.push_back({"dice_loss", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      Tensor masks_m = uniform({2, 6, 6, 6}, rng, 0, 1, false), masks_f = uniform({2, 6, 6, 6}, rng, 0, 1, false);
                      Tensor aff = smooth({3, 6, 6, 6}, rng, 1.0), def = smooth({3, 6, 6, 6}, rng, 2.0);
                      return grad_check(
                          [&](std::span<const Tensor> in) {
                              return tap(dice_loss(masks_m, masks_f, DisplacementField{in[0]}, DisplacementField{in[1]}));
                          },
                          {aff, def}, opts(seed, true));
                  }});
    cs.push_back({"dfi", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      RegistrationNet net(NetConfig{}, seed);
                      Tensor v0 = uniform({3, 2, 2, 2}, rng, -0.4, 0.4), v1 = uniform({3, 4, 4, 4}, rng, -0.4, 0.4),
                             v2 = uniform({3, 8, 8, 8}, rng, -0.4, 0.4);
                      Tensor& gate = net.params().get("dfi3.w");
                      return grad_check(
                          [&](std::span<const Tensor> in) {
                              return tap(
                                  net.dfi({VelocityField{in[0]}, VelocityField{in[1]}, VelocityField{in[2]}}, 3).field.vectors);
                          },
                          {v0, v1, v2, gate}, opts(seed, true, 24));
                  }});
    cs.push_back({"nff", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      RegistrationNet net(NetConfig{}, seed);
                      Tensor em = uniform({16, 4, 4, 4}, rng, -1, 1), ef = uniform({16, 4, 4, 4}, rng, -1, 1),
                             up = uniform({16, 4, 4, 4}, rng, -1, 1);
                      return grad_check([&](std::span<const Tensor> in) { return tap(net.nff(in[0], in[1], in[2], 2)); },
                                        {em, ef, up, net.params().get("dec.l2.nff.channel.w"), net.params().get("dec.l2.nff.spatial.w")},
                                        opts(seed, false, 24));
                  }});
    cs.push_back({"affine_net", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      RegistrationNet net(NetConfig{}, seed);
                      unpin(net, seed + 1);
                      Tensor m = smooth({1, 8, 8, 8}, rng, 1.0, false), f = smooth({1, 8, 8, 8}, rng, 1.0, false);
                      std::vector<Tensor> params;
                      for (auto& [name, t] : net.params()) {
                          if (RegistrationNet::is_affine_param(name)) params.push_back(t);
                      }
                      return grad_check(
                          [&](std::span<const Tensor>) {
                              const AffineParams a = net.affine_net(m, f);
                              return tap(concat({reshape(a.a_star, {9}), a.translation}));
                          },
                          params, opts(seed, true, 2));
                  }});
    cs.push_back({"full_network", kSamplingTolerance, [](std::uint64_t seed, const Tap& tap) {
                      std::mt19937_64 rng(seed);
                      RegistrationNet net(NetConfig{}, seed);
                      unpin(net, seed + 1);
                      Tensor m = smooth({1, 8, 8, 8}, rng, 1.0, false), f = smooth({1, 8, 8, 8}, rng, 1.0, false);
                      std::vector<Tensor> params;
                      for (auto& [name, t] : net.params()) params.push_back(t);
                      return grad_check(
                          [&](std::span<const Tensor>) {
                              const RegistrationResult r = net.forward(m, f);
                              const LossParts parts{affine_loss(r.affine.a_star), smoothness_loss(r.phi_def),
                                                    nlcc_loss(r.moved, f), std::nullopt};
                              return tap(total_loss(parts, LossWeights{}));
                          },
                          params, opts(seed, true, 1));
                  }});
    return cs;
}

} // namespace

bool GradCheckReport::passed() const {
    if (entries.empty()) return false;
    for (const auto& e : entries) {
        if (!e.passed()) return false;
    }
    return true;
}

std::string GradCheckReport::to_text() const {
    std::ostringstream os;
    os << "seed " << seed << '\n';
    char line[160];
    for (const auto& e : entries) {
        std::snprintf(line, sizeof line, "%-20s max_rel_error=%.3e tol=%.0e checked=%zu %s\n", e.name.c_str(), e.max_rel_error,
                      e.tolerance, e.checked, e.passed() ? "PASS" : "FAIL");
        os << line;
    }
    os << (passed() ? "all passed" : "FAILED") << '\n';
    return os.str();
}

std::vector<std::string> gradcheck_case_names() {
    std::vector<std::string> names;
    for (const auto& c : make_cases()) names.push_back(c.name);
    return names;
}

GradCheckReport run_gradcheck(std::uint64_t seed, const std::string& fault) {
    GradCheckReport report;
    report.seed = seed;
    const auto cases = make_cases();
    if (!fault.empty() && std::none_of(cases.begin(), cases.end(), [&](const Case& c) { return c.name == fault; })) {
        throw std::invalid_argument("gradcheck: unknown case '" + fault + "'");
    }
    std::uint64_t index = 0;
    for (const auto& c : cases) {
        const bool broken = c.name == fault;
        const Tap tap = [broken](Tensor t) { return broken ? broken_identity(t) : t; };
        const GradCheckResult r = c.body(seed * 1000 + index++, tap);
        report.entries.push_back({c.name, c.tolerance, r.max_rel_error, r.checked});
    }
    return report;
}

} // namespace dreg
