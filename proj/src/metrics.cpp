#include "dreg/metrics.hpp"

#include "dreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace dreg {

namespace {

struct Grid {
    std::int64_t D, H, W;
    const double* v;

    std::int64_t size() const { return D * H * W; }
};

Grid grid_of(const Tensor& t, const char* what) {
    if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2), t.data().data()};
    if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.dim(3), t.data().data()};
    throw ShapeError(std::string(what) + ": expected [D,H,W] or [1,D,H,W], got " + to_string(t.shape()));
}

void require_same(const Grid& a, const Grid& b, const char* what) {
    if (a.D != b.D || a.H != b.H || a.W != b.W) throw ShapeError(std::string(what) + ": extents differ");
}

bool inside(double v) { return v > 0.5; }

// Mask voxels with a 6-neighbour outside the mask or outside the grid.
std::vector<std::int64_t> surface(const Grid& g) {
    std::vector<std::int64_t> out;
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < g.D; ++z)
        for (std::int64_t y = 0; y < g.H; ++y)
            for (std::int64_t x = 0; x < g.W; ++x, ++i) {
                if (!inside(g.v[i])) continue;
                const bool edge = x == 0 || y == 0 || z == 0 || x == g.W - 1 || y == g.H - 1 || z == g.D - 1;
                if (edge || !inside(g.v[i - 1]) || !inside(g.v[i + 1]) || !inside(g.v[i - g.W]) ||
                    !inside(g.v[i + g.W]) || !inside(g.v[i - g.W * g.H]) || !inside(g.v[i + g.W * g.H])) {
                    out.push_back(i);
                }
            }
    return out;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1-D squared distance transform (lower envelope of parabolas) over n
// samples spaced `step` apart in memory, with axis weight w = spacing^2.
void edt_1d(double* f, std::int64_t n, std::int64_t step, double w, std::vector<double>& scratch,
            std::vector<std::int64_t>& sites, std::vector<double>& bounds) {
    scratch.resize(static_cast<std::size_t>(n));
    sites.clear();
    bounds.clear();
    for (std::int64_t q = 0; q < n; ++q) {
        scratch[q] = f[q * step];
        if (scratch[q] == kInf) continue;
        const double fq = scratch[q] + w * static_cast<double>(q * q);
        while (!sites.empty()) {
            const std::int64_t r = sites.back();
            const double fr = scratch[r] + w * static_cast<double>(r * r);
            const double s = (fq - fr) / (2.0 * w * static_cast<double>(q - r));
            if (s <= bounds.back()) {
                sites.pop_back();
                bounds.pop_back();
            } else {
                break;
            }
        }
        if (sites.empty()) {
            bounds.push_back(-kInf);
        } else {
            const std::int64_t r = sites.back();
            const double fr = scratch[r] + w * static_cast<double>(r * r);
            bounds.push_back((fq - fr) / (2.0 * w * static_cast<double>(q - r)));
        }
        sites.push_back(q);
    }
    if (sites.empty()) return;
    std::size_t k = 0;
    for (std::int64_t p = 0; p < n; ++p) {
        while (k + 1 < sites.size() && bounds[k + 1] < static_cast<double>(p)) ++k;
        const double d = static_cast<double>(p - sites[k]);
        f[p * step] = w * d * d + scratch[sites[k]];
    }
}

// Squared Euclidean distance from every voxel to the nearest listed voxel.
std::vector<double> squared_distance_map(const Grid& g, const std::vector<std::int64_t>& features, const Spacing& sp) {
    std::vector<double> f(static_cast<std::size_t>(g.size()), kInf);
    for (auto i : features) f[i] = 0.0;
    std::vector<double> scratch, bounds;
    std::vector<std::int64_t> sites;
    for (std::int64_t z = 0; z < g.D; ++z)
        for (std::int64_t y = 0; y < g.H; ++y) edt_1d(f.data() + (z * g.H + y) * g.W, g.W, 1, sp[0] * sp[0], scratch, sites, bounds);
    for (std::int64_t z = 0; z < g.D; ++z)
        for (std::int64_t x = 0; x < g.W; ++x) edt_1d(f.data() + z * g.H * g.W + x, g.H, g.W, sp[1] * sp[1], scratch, sites, bounds);
    for (std::int64_t y = 0; y < g.H; ++y)
        for (std::int64_t x = 0; x < g.W; ++x) edt_1d(f.data() + y * g.W + x, g.D, g.H * g.W, sp[2] * sp[2], scratch, sites, bounds);
    return f;
}

struct Surfaces {
    Grid ga, gb;
    std::vector<std::int64_t> sa, sb;
};

Surfaces surfaces_of(const Tensor& a, const Tensor& b, const char* what) {
    Surfaces s{grid_of(a, what), grid_of(b, what), {}, {}};
    require_same(s.ga, s.gb, what);
    s.sa = surface(s.ga);
    s.sb = surface(s.gb);
    if (s.sa.empty() || s.sb.empty()) throw std::invalid_argument(std::string(what) + ": empty mask");
    return s;
}

double max_distance(const std::vector<std::int64_t>& from, const std::vector<double>& dist2) {
    double m = 0.0;
    for (auto i : from) m = std::max(m, dist2[i]);
    return std::sqrt(m);
}

double sum_distance(const std::vector<std::int64_t>& from, const std::vector<double>& dist2) {
    double s = 0.0;
    for (auto i : from) s += std::sqrt(dist2[i]);
    return s;
}

struct Selection {
    Grid a, b;
    const double* m = nullptr;

    bool take(std::int64_t i) const { return m == nullptr || m[i] != 0.0; }
};

Selection select_pair(const Tensor& a, const Tensor& b, const Tensor* mask, const char* what) {
    Selection s{grid_of(a, what), grid_of(b, what), nullptr};
    require_same(s.a, s.b, what);
    if (mask) {
        Grid gm = grid_of(*mask, what);
        require_same(s.a, gm, what);
        s.m = gm.v;
    }
    return s;
}

int bin_of(double v, int bins) {
    const double c = std::clamp(v, 0.0, 1.0);
    return std::min(static_cast<int>(c * bins), bins - 1);
}

double entropy_of(const std::vector<double>& counts, double total) {
    double h = 0.0;
    for (double c : counts) {
        if (c > 0.0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

Tensor channel(const Tensor& t, std::int64_t c) {
    return reshape(slice(t, c, c + 1), {1, t.dim(1), t.dim(2), t.dim(3)});
}

} // namespace

double dice_score(const Tensor& a, const Tensor& b) {
    const Grid ga = grid_of(a, "dice_score"), gb = grid_of(b, "dice_score");
    require_same(ga, gb, "dice_score");
    std::int64_t na = 0, nb = 0, both = 0;
    for (std::int64_t i = 0; i < ga.size(); ++i) {
        const bool x = inside(ga.v[i]), y = inside(gb.v[i]);
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double hausdorff(const Tensor& a, const Tensor& b, const Spacing& spacing, bool symmetric) {
    const Surfaces s = surfaces_of(a, b, "hausdorff");
    const double ab = max_distance(s.sa, squared_distance_map(s.gb, s.sb, spacing));
    if (!symmetric) return ab;
    return std::max(ab, max_distance(s.sb, squared_distance_map(s.ga, s.sa, spacing)));
}

double assd(const Tensor& a, const Tensor& b, const Spacing& spacing) {
    const Surfaces s = surfaces_of(a, b, "assd");
    const double ab = sum_distance(s.sa, squared_distance_map(s.gb, s.sb, spacing));
    const double ba = sum_distance(s.sb, squared_distance_map(s.ga, s.sa, spacing));
    return (ab + ba) / static_cast<double>(s.sa.size() + s.sb.size());
}

double ncc(const Tensor& a, const Tensor& b, const Tensor* mask) {
    const Selection s = select_pair(a, b, mask, "ncc");
    double ma = 0.0, mb = 0.0, n = 0.0;
    for (std::int64_t i = 0; i < s.a.size(); ++i) {
        if (!s.take(i)) continue;
        ma += s.a.v[i];
        mb += s.b.v[i];
        n += 1.0;
    }
    if (n == 0.0) return 0.0;
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::int64_t i = 0; i < s.a.size(); ++i) {
        if (!s.take(i)) continue;
        const double da = s.a.v[i] - ma, db = s.b.v[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

double mutual_information(const Tensor& a, const Tensor& b, const Tensor* mask, int bins) {
    if (bins < 1) throw std::invalid_argument("mutual_information: bins must be >= 1");
    const Selection s = select_pair(a, b, mask, "mutual_information");
    std::vector<double> joint(static_cast<std::size_t>(bins * bins), 0.0);
    double n = 0.0;
    for (std::int64_t i = 0; i < s.a.size(); ++i) {
        if (!s.take(i)) continue;
        joint[bin_of(s.a.v[i], bins) * bins + bin_of(s.b.v[i], bins)] += 1.0;
        n += 1.0;
    }
    if (n == 0.0) return 0.0;
    std::vector<double> pa(static_cast<std::size_t>(bins), 0.0), pb(static_cast<std::size_t>(bins), 0.0);
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    return entropy_of(pa, n) + entropy_of(pb, n) - entropy_of(joint, n);
}

double entropy(const Tensor& a, const Tensor* mask, int bins) {
    if (bins < 1) throw std::invalid_argument("entropy: bins must be >= 1");
    const Selection s = select_pair(a, a, mask, "entropy");
    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    double n = 0.0;
    for (std::int64_t i = 0; i < s.a.size(); ++i) {
        if (!s.take(i)) continue;
        counts[bin_of(s.a.v[i], bins)] += 1.0;
        n += 1.0;
    }
    return n == 0.0 ? 0.0 : entropy_of(counts, n);
}

double mse(const Tensor& a, const Tensor& b, const Tensor* mask) {
    const Selection s = select_pair(a, b, mask, "mse");
    double acc = 0.0, n = 0.0;
    for (std::int64_t i = 0; i < s.a.size(); ++i) {
        if (!s.take(i)) continue;
        const double d = s.a.v[i] - s.b.v[i];
        acc += d * d;
        n += 1.0;
    }
    return n == 0.0 ? 0.0 : acc / n;
}

Tensor foreground_mask(const Tensor& fixed) {
    std::vector<double> m(fixed.data().size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = fixed.data()[i] > 0.0 ? 1.0 : 0.0;
    return Tensor::from_data(fixed.shape(), std::move(m));
}

double modality_average(const ImageMetric& metric, const Tensor& moved, const Tensor& fixed) {
    if (moved.rank() != 4 || moved.shape() != fixed.shape() || moved.dim(0) < 1) {
        throw ShapeError("modality_average: " + to_string(moved.shape()) + " vs " + to_string(fixed.shape()));
    }
    double total = 0.0;
    for (std::int64_t c = 0; c < moved.dim(0); ++c) total += metric(channel(moved, c), channel(fixed, c));
    return total / static_cast<double>(moved.dim(0));
}

namespace {
constexpr const char* kKeys[] = {"dice", "hd", "assd", "ncc", "mi", "mse", "jacobian_std", "folding_fraction"};
}

void MetricReport::write(std::ostream& os) const {
    const std::optional<double> values[] = {dice, hd, assd, ncc, mi, mse, jacobian_std, folding_fraction};
    char buf[64];
    for (std::size_t k = 0; k < std::size(kKeys); ++k) {
        if (!values[k]) continue;
        std::snprintf(buf, sizeof buf, "%.17g", *values[k]);
        os << kKeys[k] << '=' << buf << '\n';
    }
}

MetricReport MetricReport::read(std::istream& is) {
    MetricReport r;
    std::optional<double>* slots[] = {&r.dice, &r.hd, &r.assd, nullptr, nullptr, nullptr, &r.jacobian_std, &r.folding_fraction};
    double* plain[] = {nullptr, nullptr, nullptr, &r.ncc, &r.mi, &r.mse, nullptr, nullptr};
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(FormatError::Kind::syntax, "metric report: missing '=' in: " + line);
        const std::string key = line.substr(0, eq);
        const auto it = std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) { return key == k; });
        if (it == std::end(kKeys)) throw FormatError(FormatError::Kind::syntax, "metric report: unknown key " + key);
        double v = 0.0;
        try {
            std::size_t used = 0;
            v = std::stod(line.substr(eq + 1), &used);
            if (used != line.size() - eq - 1) throw std::invalid_argument(line);
        } catch (const std::exception&) {
            throw FormatError(FormatError::Kind::syntax, "metric report: bad value in: " + line);
        }
        const auto k = static_cast<std::size_t>(it - std::begin(kKeys));
        if (slots[k]) *slots[k] = v;
        else *plain[k] = v;
    }
    return r;
}

MetricReport evaluate(const EvalInputs& in) {
    NoGradGuard no_grad;
    MetricReport r;
    if (in.moved.rank() != 4 || in.moved.shape() != in.fixed.shape()) {
        throw ShapeError("evaluate: moved " + to_string(in.moved.shape()) + " vs fixed " + to_string(in.fixed.shape()));
    }
    auto masked = [](auto fn) {
        return [fn](const Tensor& m, const Tensor& f) {
            const Tensor fg = foreground_mask(f);
            const bool any = std::any_of(fg.data().begin(), fg.data().end(), [](double v) { return v != 0.0; });
            return fn(m, f, any ? &fg : nullptr);
        };
    };
    r.ncc = modality_average(masked([](const Tensor& a, const Tensor& b, const Tensor* m) { return ncc(a, b, m); }), in.moved, in.fixed);
    r.mi = modality_average(masked([](const Tensor& a, const Tensor& b, const Tensor* m) { return mutual_information(a, b, m); }), in.moved, in.fixed);
    r.mse = modality_average(masked([](const Tensor& a, const Tensor& b, const Tensor* m) { return mse(a, b, m); }), in.moved, in.fixed);

    if (in.masks_moving.has_value() != in.masks_fixed.has_value()) {
        throw std::invalid_argument("evaluate: moving and fixed masks must be given together");
    }
    if (in.masks_moving) {
        const Tensor& mf = *in.masks_fixed;
        if (in.masks_moving->shape() != mf.shape() || mf.rank() != 4 ||
            Shape{mf.dim(1), mf.dim(2), mf.dim(3)} != Shape{in.fixed.dim(1), in.fixed.dim(2), in.fixed.dim(3)}) {
            throw ShapeError("evaluate: masks " + to_string(in.masks_moving->shape()) + " vs " + to_string(mf.shape()) +
                             " for images " + to_string(in.fixed.shape()));
        }
        const Tensor mm = in.transform ? warp(*in.masks_moving, *in.transform, Interp::nearest) : *in.masks_moving;
        double dice = 0.0, hd = 0.0, sd = 0.0;
        int surfaces = 0;
        for (std::int64_t c = 0; c < mf.dim(0); ++c) {
            const Tensor a = channel(mm, c), b = channel(mf, c);
            dice += dice_score(a, b);
            const auto nonempty = [](const Tensor& t) {
                return std::any_of(t.data().begin(), t.data().end(), [](double v) { return v > 0.5; });
            };
            if (nonempty(a) && nonempty(b)) {
                hd += hausdorff(a, b, in.spacing);
                sd += assd(a, b, in.spacing);
                ++surfaces;
            }
        }
        r.dice = dice / static_cast<double>(mf.dim(0));
        if (surfaces > 0) {
            r.hd = hd / surfaces;
            r.assd = sd / surfaces;
        }
    }
    if (in.phi_def) {
        const auto s = smoothness_report(*in.phi_def);
        r.jacobian_std = s.jacobian_std;
        r.folding_fraction = s.folding_fraction;
    }
    return r;
}

} // namespace dreg
