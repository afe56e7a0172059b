#include "dreg/network.hpp"

#include "dreg/error.hpp"
#include "dreg/keyvalue.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace dreg {

namespace {

template <std::size_t N>
std::string join(const std::array<std::int64_t, N>& xs) {
    std::string s;
    for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

template <std::size_t N>
std::array<std::int64_t, N> fixed_list(const KeyValues& kv, const std::string& key, const std::array<std::int64_t, N>& fallback) {
    if (!kv.has(key)) return fallback;
    const auto xs = kv.integers(key);
    if (xs.size() != N) {
        throw FormatError(FormatError::Kind::syntax, "net config: " + key + " needs " + std::to_string(N) + " entries");
    }
    std::array<std::int64_t, N> out{};
    std::copy(xs.begin(), xs.end(), out.begin());
    return out;
}

// Channel count of decoder feature map D^l.
std::int64_t decoder_channels(const NetConfig& cfg, int level) {
    return level == 0 ? cfg.encoder_widths[3] : 3 * cfg.encoder_widths[3 - level];
}

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> values(static_cast<std::size_t>(numel(shape)));
    for (double& v : values) v = normal(rng);
    return Tensor::from_data(std::move(shape), std::move(values), true);
}

Tensor kaiming(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    return normal_init(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

// Velocity heads start near zero so the initial deformation is close to the
// identity instead of a random field tens of voxels large.
constexpr double kHeadInitStd = 1e-5;

} // namespace

void NetConfig::validate() const {
    if (input_channels != 1 && input_channels != 2) throw std::invalid_argument("net config: input_channels must be 1 or 2");
    for (auto w : encoder_widths) {
        if (w <= 0) throw std::invalid_argument("net config: encoder widths must be positive");
    }
    for (auto w : affine_widths) {
        if (w <= 0) throw std::invalid_argument("net config: affine widths must be positive");
    }
    if (t_steps < 0 || t_steps > 30) throw std::invalid_argument("net config: t_steps out of range");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw std::invalid_argument("net config: leaky_slope must be in [0, 1)");
    if (nff_spatial_kernel < 1 || nff_spatial_kernel % 2 == 0) {
        throw std::invalid_argument("net config: nff_spatial_kernel must be odd and positive");
    }
}

std::string NetConfig::to_text() const {
    char slope[64];
    std::snprintf(slope, sizeof slope, "%.17g", leaky_slope);
    std::ostringstream os;
    os << "input_channels=" << input_channels << '\n'
       << "encoder_widths=" << join(encoder_widths) << '\n'
       << "affine_widths=" << join(affine_widths) << '\n'
       << "t_steps=" << t_steps << '\n'
       << "leaky_slope=" << slope << '\n'
       << "nff_spatial_kernel=" << nff_spatial_kernel << '\n';
    return os.str();
}

NetConfig NetConfig::from_text(const std::string& text) {
    const KeyValues kv = KeyValues::parse(text, "net config");
    kv.reject_unknown({"input_channels", "encoder_widths", "affine_widths", "t_steps", "leaky_slope", "nff_spatial_kernel"});
    NetConfig c;
    c.input_channels = kv.integer("input_channels", c.input_channels);
    c.encoder_widths = fixed_list(kv, "encoder_widths", c.encoder_widths);
    c.affine_widths = fixed_list(kv, "affine_widths", c.affine_widths);
    c.t_steps = static_cast<int>(kv.integer("t_steps", c.t_steps));
    c.leaky_slope = kv.number("leaky_slope", c.leaky_slope);
    c.nff_spatial_kernel = static_cast<int>(kv.integer("nff_spatial_kernel", c.nff_spatial_kernel));
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::syntax, e.what());
    }
    return c;
}

RegistrationNet::RegistrationNet(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    auto conv_param = [&](const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t k, bool bias) {
        params_.add(name + ".w", kaiming({cout, cin, k, k, k}, cin * k * k * k, rng));
        if (bias) params_.add(name + ".b", Tensor::zeros({cout}, true));
    };

    const auto& aw = cfg_.affine_widths;
    std::int64_t cin = 2 * cfg_.input_channels;
    for (std::size_t b = 0; b < aw.size(); ++b) {
        const std::string p = "affine.b" + std::to_string(b);
        conv_param(p + ".entry", cin, aw[b], 3, true);
        conv_param(p + ".c1", aw[b], aw[b], 3, true);
        conv_param(p + ".c2", aw[b], aw[b], 3, true);
        cin = aw[b];
    }
    params_.add("affine.head.w", Tensor::zeros({12, aw.back()}, true));
    params_.add("affine.head.b", Tensor::zeros({12}, true));

    const auto& ew = cfg_.encoder_widths;
    for (const std::string branch : {"enc_m", "enc_f"}) {
        conv_param(branch + ".b0.conv", cfg_.input_channels, ew[0], 3, false);
        for (int b = 1; b < kLevels; ++b) {
            const std::string p = branch + ".b" + std::to_string(b);
            conv_param(p + ".down", ew[b - 1], ew[b], 3, false);
            conv_param(p + ".c1", ew[b], ew[b], 3, false);
            conv_param(p + ".c2", ew[b], ew[b], 3, false);
        }
    }

    conv_param("dec.d0", 2 * ew[3], decoder_channels(cfg_, 0), 3, true);
    auto head_param = [&](const std::string& name, std::int64_t cin) {
        params_.add(name + ".w", normal_init({3, cin, 3, 3, 3}, kHeadInitStd, rng));
        params_.add(name + ".b", Tensor::zeros({3}, true));
    };
    head_param("dec.head0", decoder_channels(cfg_, 0));
    for (int l = 1; l < kLevels; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        const std::int64_t prev = decoder_channels(cfg_, l - 1), width = ew[3 - l], ch = decoder_channels(cfg_, l);
        // Transposed kernel 4, stride 2: each output voxel sees prev * 2^3 taps.
        params_.add(p + ".up.w", kaiming({prev, width, 4, 4, 4}, prev * 8, rng));
        params_.add(p + ".up.b", Tensor::zeros({width}, true));
        conv_param(p + ".nff.channel", ch, ch, 1, true);
        conv_param(p + ".nff.spatial", ch, 3, cfg_.nff_spatial_kernel, true);
        head_param(p + ".head", ch);
    }
    for (int stage = 1; stage <= kFinalStage; ++stage) {
        conv_param("dfi" + std::to_string(stage), 3 * stage, stage, 3, true);
    }
}

bool RegistrationNet::is_affine_param(const std::string& name) { return name.starts_with("affine."); }

std::int64_t RegistrationNet::deformable_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) {
        if (!is_affine_param(name)) n += t.numel();
    }
    return n;
}

Tensor RegistrationNet::conv(const Tensor& x, const std::string& name, int stride, int padding) const {
    const std::string bias = name + ".b";
    return conv3d(x, params_.get(name + ".w"), params_.contains(bias) ? params_.get(bias) : Tensor{}, stride, padding);
}

Tensor RegistrationNet::act(const Tensor& x) const { return leaky_relu(x, cfg_.leaky_slope); }

Tensor RegistrationNet::resblock(const Tensor& x, const std::string& name, bool norm) const {
    auto maybe_norm = [&](const Tensor& t) { return norm ? instance_norm(t) : t; };
    const Tensor h = act(maybe_norm(conv(x, name + ".c1", 1, 1)));
    return act(x + maybe_norm(conv(h, name + ".c2", 1, 1)));
}

EncoderPyramid RegistrationNet::encode(const Tensor& image, const std::string& branch) const {
    if (image.rank() != 4 || image.dim(0) != cfg_.input_channels) {
        throw ShapeError("encode: expected [" + std::to_string(cfg_.input_channels) + ", D, H, W], got " +
                         to_string(image.shape()));
    }
    for (std::size_t a = 1; a < 4; ++a) {
        if (image.dim(a) % 8 != 0) throw ShapeError("encode: extents must be divisible by 8, got " + to_string(image.shape()));
    }
    EncoderPyramid out;
    Tensor x = act(instance_norm(conv(image, branch + ".b0.conv", 1, 1)));
    out.levels[3] = x;
    for (int b = 1; b < kLevels; ++b) {
        const std::string p = branch + ".b" + std::to_string(b);
        x = act(instance_norm(conv(x, p + ".down", 2, 1)));
        x = resblock(x, p, true);
        out.levels[3 - b] = x;
    }
    return out;
}

DfiResult RegistrationNet::dfi(const std::vector<VelocityField>& velocities, int stage, bool unit_weights) const {
    if (velocities.empty()) throw std::invalid_argument("dfi: no velocities");
    if (stage < 1 || stage > kFinalStage || static_cast<std::size_t>(stage) != velocities.size()) {
        throw std::invalid_argument("dfi: stage " + std::to_string(stage) + " needs exactly that many velocities, got " +
                                    std::to_string(velocities.size()));
    }
    const int target = std::min(stage, kLevels - 1);
    std::vector<Tensor> up;
    for (int m = 0; m < stage; ++m) {
        const int factor = 1 << (target - m);
        const Tensor& v = velocities[static_cast<std::size_t>(m)].vectors;
        up.push_back(factor == 1 ? v : upsample_field(velocities[static_cast<std::size_t>(m)], factor).vectors);
        if (up.back().shape() != up.front().shape()) {
            throw ShapeError("dfi: velocity " + std::to_string(m) + " upsamples to " + to_string(up.back().shape()) +
                             ", expected " + to_string(up.front().shape()));
        }
    }
    DfiResult r;
    Tensor gates;
    if (!unit_weights) gates = sigmoid(conv(concat(up), "dfi" + std::to_string(stage), 1, 1));
    Tensor fused;
    for (int m = 0; m < stage; ++m) {
        Tensor term = up[static_cast<std::size_t>(m)];
        if (!unit_weights) {
            r.gates.push_back(slice(gates, m, m + 1));
            term = r.gates.back() * term;
        }
        fused = fused.defined() ? fused + term : term;
    }
    r.fused = VelocityField{fused};
    r.field = integrate_velocity(r.fused, cfg_.t_steps);
    return r;
}

Tensor RegistrationNet::nff(const Tensor& e_m_warped, const Tensor& e_f, const Tensor& d_prev_up, int level) const {
    if (e_m_warped.shape() != e_f.shape()) {
        throw ShapeError("nff: warped moving features " + to_string(e_m_warped.shape()) + " vs fixed features " +
                         to_string(e_f.shape()));
    }
    if (d_prev_up.rank() != 4 || d_prev_up.dim(1) != e_f.dim(1) || d_prev_up.dim(2) != e_f.dim(2) ||
        d_prev_up.dim(3) != e_f.dim(3)) {
        throw ShapeError("nff: decoder features " + to_string(d_prev_up.shape()) + " vs encoder features " +
                         to_string(e_f.shape()));
    }
    const std::string p = "dec.l" + std::to_string(level) + ".nff";
    const Tensor x = concat({e_m_warped, e_f, d_prev_up});
    const std::int64_t c = x.dim(0);
    const Tensor pooled = reshape(global_avg_pool(x), {c, 1, 1, 1});
    const Tensor channel = softmax(conv(pooled, p + ".channel", 1, 0), 0);
    const Tensor spatial = softmax(conv(x, p + ".spatial", 1, cfg_.nff_spatial_kernel / 2), 0);
    const std::int64_t bounds[] = {0, e_m_warped.dim(0), 2 * e_m_warped.dim(0), c};
    std::vector<Tensor> parts;
    for (int k = 0; k < 3; ++k) {
        const Tensor weight = slice(channel, bounds[k], bounds[k + 1]) * slice(spatial, k, k + 1);
        parts.push_back(slice(x, bounds[k], bounds[k + 1]) * weight);
    }
    return concat(parts);
}

VelocityField RegistrationNet::velocity_head(const Tensor& d, int level) const {
    return VelocityField{conv(d, level == 0 ? "dec.head0" : "dec.l" + std::to_string(level) + ".head", 1, 1)};
}

AffineParams RegistrationNet::affine_net(const Tensor& moving, const Tensor& fixed) const {
    if (moving.shape() != fixed.shape() || moving.rank() != 4 || moving.dim(0) != cfg_.input_channels) {
        throw ShapeError("affine_net: moving " + to_string(moving.shape()) + " vs fixed " + to_string(fixed.shape()));
    }
    for (std::size_t a = 1; a < 4; ++a) {
        if (moving.dim(a) % 8 != 0) throw ShapeError("affine_net: extents must be divisible by 8, got " + to_string(moving.shape()));
    }
    Tensor x = concat({moving, fixed});
    for (std::size_t b = 0; b < cfg_.affine_widths.size(); ++b) {
        const std::string p = "affine.b" + std::to_string(b);
        x = act(conv(x, p + ".entry", 2, 1));
        x = resblock(x, p, false);
    }
    const Tensor out = linear(global_avg_pool(x), params_.get("affine.head.w"), params_.get("affine.head.b"));
    AffineParams a;
    a.a_star = reshape(slice(out, 0, 9), {3, 3});
    // The head predicts the translation about the grid centre c; the realized
    // map keeps the form A* p + t with t = t_c - A* c.
    const Tensor neg_centre = Tensor::from_data(
        {3}, {-0.5 * static_cast<double>(moving.dim(3) - 1), -0.5 * static_cast<double>(moving.dim(2) - 1),
              -0.5 * static_cast<double>(moving.dim(1) - 1)});
    a.translation = linear(neg_centre, a.a_star, slice(out, 9, 12));
    return a;
}

RegistrationNet::Deformable RegistrationNet::deformable(const Tensor& moving, const Tensor& fixed) const {
    const EncoderPyramid em = encode(moving, "enc_m");
    const EncoderPyramid ef = encode(fixed, "enc_f");
    Deformable out;
    Tensor d = act(conv(concat({em.levels[0], ef.levels[0]}), "dec.d0", 1, 1));
    out.velocities.push_back(velocity_head(d, 0));
    for (int l = 1; l < kLevels; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        const DfiResult phi = dfi(out.velocities, l);
        const Tensor up = act(conv_transpose3d(d, params_.get(p + ".up.w"), params_.get(p + ".up.b")));
        d = nff(warp(em.levels[static_cast<std::size_t>(l)], phi.field), ef.levels[static_cast<std::size_t>(l)], up, l);
        out.velocities.push_back(velocity_head(d, l));
    }
    out.phi_def = dfi(out.velocities, kFinalStage).field;
    return out;
}

RegistrationResult RegistrationNet::forward(const Tensor& moving, const Tensor& fixed, int cascades) const {
    if (cascades < 1) throw std::invalid_argument("forward: cascades must be at least 1");
    RegistrationResult r;
    r.affine = affine_net(moving, fixed);
    const Shape spatial{moving.dim(1), moving.dim(2), moving.dim(3)};
    r.phi_aff = apply_affine(r.affine, spatial);
    r.affine_moved = warp(moving, r.phi_aff);
    Tensor current = r.affine_moved;
    for (int c = 0; c < cascades; ++c) {
        Deformable pass = deformable(current, fixed);
        r.phi_def = c == 0 ? pass.phi_def : compose(r.phi_def, pass.phi_def);
        r.velocities = std::move(pass.velocities);
        current = warp(r.affine_moved, r.phi_def);
    }
    r.moved = current;
    return r;
}

} // namespace dreg
