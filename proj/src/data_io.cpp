#include "dreg/data_io.hpp"

#include "dreg/error.hpp"
#include "dreg/keyvalue.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace dreg {

static_assert(std::endian::native == std::endian::little, "containers are stored in host little-endian order");

namespace fs = std::filesystem;

namespace {

constexpr char kVolumeMagic[8] = {'D', 'R', 'E', 'G', 'V', 'O', 'L', '1'};
constexpr char kCheckpointMagic[8] = {'D', 'R', 'E', 'G', 'C', 'K', 'P', '1'};

class Writer {
public:
    template <class T>
    void put(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.append(p, sizeof v);
    }
    void put_bytes(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
    const std::string& bytes() const { return bytes_; }

private:
    std::string bytes_;
};

class Reader {
public:
    Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    template <class T>
    T get() {
        T v;
        take(&v, sizeof v);
        return v;
    }
    void take(void* out, std::size_t n) {
        if (n > bytes_.size() - pos_) {
            throw FormatError(FormatError::Kind::truncated, what_ + ": unexpected end of file at byte " + std::to_string(pos_));
        }
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    std::string bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError(FormatError::Kind::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw FormatError(FormatError::Kind::io, "cannot rename onto " + path.string() + ": " + ec.message());
    }
}

} // namespace

void write_text_atomic(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string read_text(const fs::path& path) { return read_file(path); }

namespace {

void check_magic(Reader& r, const char (&magic)[8], const std::string& what) {
    char m[8];
    if (r.remaining() < 8) throw FormatError(FormatError::Kind::bad_magic, what + ": file too short for a header");
    r.take(m, 8);
    if (std::memcmp(m, magic, 8) != 0) throw FormatError(FormatError::Kind::bad_magic, what + ": bad magic");
}

} // namespace

// ---------------------------------------------------------------------------
// volumes

void Volume::validate() const {
    if (channels < 1 || depth < 1 || height < 1 || width < 1) {
        throw ShapeError("volume: extents must be positive, got " + to_string(shape()));
    }
    if (static_cast<std::int64_t>(data.size()) != numel(shape())) {
        throw ShapeError("volume: " + std::to_string(data.size()) + " values for shape " + to_string(shape()));
    }
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("volume: spacing must be positive");
    }
}

Tensor to_tensor(const Volume& v) {
    v.validate();
    return Tensor::from_data(v.shape(), std::vector<double>(v.data.begin(), v.data.end()));
}

Volume to_volume(const Tensor& t, const Spacing& spacing) {
    if (t.rank() != 4) throw ShapeError("to_volume: expected [C,D,H,W], got " + to_string(t.shape()));
    Volume v{t.dim(0), t.dim(1), t.dim(2), t.dim(3), spacing, {}};
    v.data.reserve(t.data().size());
    for (double x : t.data()) v.data.push_back(static_cast<float>(x));
    return v;
}

void write_volume(const fs::path& path, const Volume& v) {
    v.validate();
    Writer w;
    w.put_bytes(kVolumeMagic, 8);
    w.put(kVolumeVersion);
    for (auto e : {v.channels, v.depth, v.height, v.width}) w.put(static_cast<std::uint32_t>(e));
    for (double s : v.spacing) w.put(s);
    w.put_bytes(v.data.data(), v.data.size() * sizeof(float));
    write_file_atomic(path, w.bytes());
}

Volume read_volume(const fs::path& path) {
    const std::string what = "volume " + path.string();
    Reader r(read_file(path), what);
    check_magic(r, kVolumeMagic, what);
    const auto version = r.get<std::uint32_t>();
    if (version != kVolumeVersion) {
        throw FormatError(FormatError::Kind::version, what + ": unsupported version " + std::to_string(version));
    }
    Volume v;
    v.channels = r.get<std::uint32_t>();
    v.depth = r.get<std::uint32_t>();
    v.height = r.get<std::uint32_t>();
    v.width = r.get<std::uint32_t>();
    for (double& s : v.spacing) s = r.get<double>();
    const auto count = static_cast<std::uint64_t>(v.channels) * v.depth * v.height * v.width;
    if (count * sizeof(float) > r.remaining()) {
        throw FormatError(FormatError::Kind::truncated, what + ": header declares " + std::to_string(count) +
                                                            " values but only " + std::to_string(r.remaining()) +
                                                            " payload bytes remain");
    }
    if (count * sizeof(float) != r.remaining()) {
        throw FormatError(FormatError::Kind::mismatch, what + ": trailing bytes after payload");
    }
    v.data.resize(count);
    r.take(v.data.data(), count * sizeof(float));
    try {
        v.validate();
    } catch (const std::exception& e) {
        throw FormatError(FormatError::Kind::mismatch, what + ": " + e.what());
    }
    return v;
}

Volume import_raw(const fs::path& raw, const fs::path& header) {
    const KeyValues kv = KeyValues::parse(read_file(header), header.string());
    kv.reject_unknown({"channels", "depth", "height", "width", "spacing_x", "spacing_y", "spacing_z"});
    Volume v;
    v.channels = kv.integer("channels", 1);
    v.depth = kv.integer("depth");
    v.height = kv.integer("height");
    v.width = kv.integer("width");
    v.spacing = {kv.number("spacing_x", 1.0), kv.number("spacing_y", 1.0), kv.number("spacing_z", 1.0)};
    const std::string bytes = read_file(raw);
    const auto count = static_cast<std::size_t>(std::max<std::int64_t>(0, v.channels * v.depth * v.height * v.width));
    if (bytes.size() != count * sizeof(float)) {
        throw FormatError(bytes.size() < count * sizeof(float) ? FormatError::Kind::truncated : FormatError::Kind::mismatch,
                          raw.string() + ": expected " + std::to_string(count * sizeof(float)) + " bytes, found " +
                              std::to_string(bytes.size()));
    }
    v.data.resize(count);
    std::memcpy(v.data.data(), bytes.data(), bytes.size());
    v.validate();
    return v;
}

Volume normalize_minmax(const Volume& v) {
    v.validate();
    Volume out = v;
    const std::int64_t n = v.depth * v.height * v.width;
    for (std::int64_t c = 0; c < v.channels; ++c) {
        const auto first = v.data.begin() + c * n;
        const auto [lo, hi] = std::minmax_element(first, first + n);
        const double mn = *lo, range = static_cast<double>(*hi) - mn;
        for (std::int64_t i = c * n; i < (c + 1) * n; ++i) {
            out.data[i] = range > 0.0 ? static_cast<float>((v.data[i] - mn) / range) : 0.0f;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthesis

namespace {

// Lattice indices and weights for one voxel coordinate.
struct Taps {
    std::array<int, 4> index{};
    std::array<double, 4> weight{};
};

std::vector<Taps> spline_taps(std::int64_t extent, int control, SplineOrder order) {
    std::vector<Taps> taps(static_cast<std::size_t>(extent));
    for (std::int64_t p = 0; p < extent; ++p) {
        const double u = extent > 1 ? static_cast<double>(p) * (control - 1) / static_cast<double>(extent - 1) : 0.0;
        const int i = std::min(static_cast<int>(std::floor(u)), control - 1);
        const double t = u - i;
        Taps& tp = taps[p];
        for (int k = 0; k < 4; ++k) tp.index[k] = std::clamp(i - 1 + k, 0, control - 1);
        if (order == SplineOrder::cubic) {
            tp.weight = {(1 - t) * (1 - t) * (1 - t) / 6.0, (3 * t * t * t - 6 * t * t + 4) / 6.0,
                         (-3 * t * t * t + 3 * t * t + 3 * t + 1) / 6.0, t * t * t / 6.0};
        } else {
            tp.weight = {0.0, 1.0 - t, t, 0.0};
        }
    }
    return taps;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Ellipsoid {
    std::array<double, 3> centre, radius; // x, y, z
    double intensity;

    // Normalized radial coordinate: < 1 inside.
    double r(double x, double y, double z) const {
        const double dx = (x - centre[0]) / radius[0], dy = (y - centre[1]) / radius[1], dz = (z - centre[2]) / radius[2];
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    }
};

struct Atlas {
    Tensor image; // [C, D, H, W], values in [0, 1]
    Tensor masks; // [n_structures, D, H, W]
};

Atlas make_atlas(const SynthConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 1);
    const std::int64_t D = cfg.spatial[0], H = cfg.spatial[1], W = cfg.spatial[2];
    const std::array<double, 3> ext{static_cast<double>(W), static_cast<double>(H), static_cast<double>(D)};
    const std::array<double, 3> mid{(W - 1) / 2.0, (H - 1) / 2.0, (D - 1) / 2.0};

    const Ellipsoid head{mid, {0.42 * ext[0], 0.42 * ext[1], 0.42 * ext[2]}, 0.5};
    struct Blob {
        std::array<double, 3> c;
        double sigma, amp;
    };
    std::vector<Blob> blobs(6);
    for (auto& b : blobs) {
        for (int a = 0; a < 3; ++a) b.c[a] = mid[a] + uniform(rng, -0.3, 0.3) * ext[a];
        b.sigma = uniform(rng, 0.1, 0.2) * ext[0];
        b.amp = uniform(rng, -0.15, 0.15);
    }
    std::vector<Ellipsoid> nuclei(static_cast<std::size_t>(cfg.n_structures));
    for (std::size_t k = 0; k < nuclei.size(); ++k) {
        auto& e = nuclei[k];
        for (int a = 0; a < 3; ++a) {
            e.centre[a] = mid[a] + uniform(rng, -0.2, 0.2) * ext[a];
            e.radius[a] = uniform(rng, 0.09, 0.16) * ext[a];
        }
        e.intensity = k % 2 == 0 ? uniform(rng, 0.8, 0.95) : uniform(rng, 0.1, 0.25);
    }

    const std::int64_t n = D * H * W;
    std::vector<double> img(static_cast<std::size_t>(cfg.channels * n), 0.0);
    std::vector<double> masks(static_cast<std::size_t>(cfg.n_structures * n), 0.0);
    auto soft = [](double r) { return 1.0 / (1.0 + std::exp((r - 1.0) / 0.06)); };
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                const double px = static_cast<double>(x), py = static_cast<double>(y), pz = static_cast<double>(z);
                double v = head.intensity;
                for (const auto& b : blobs) {
                    const double d2 = (px - b.c[0]) * (px - b.c[0]) + (py - b.c[1]) * (py - b.c[1]) + (pz - b.c[2]) * (pz - b.c[2]);
                    v += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
                }
                int label = -1;
                for (std::size_t k = 0; k < nuclei.size(); ++k) {
                    const double r = nuclei[k].r(px, py, pz);
                    const double s = soft(r);
                    v = (1 - s) * v + s * nuclei[k].intensity;
                    if (r < 1.0) label = static_cast<int>(k);
                }
                const double inside_head = soft(head.r(px, py, pz));
                img[i] = inside_head * v;
                // second modality: inverted contrast inside the head
                if (cfg.channels > 1) img[n + i] = inside_head * (1.0 - 0.9 * v);
                if (label >= 0) masks[label * n + i] = 1.0;
            }
    Volume vol = to_volume(Tensor::from_data({cfg.channels, D, H, W}, std::move(img)));
    vol = normalize_minmax(vol);
    return {to_tensor(vol), Tensor::from_data({cfg.n_structures, D, H, W}, std::move(masks))};
}

Tensor add_noise(const Tensor& t, double sigma, std::mt19937_64& rng) {
    if (sigma <= 0.0) return t;
    std::normal_distribution<double> g(0.0, sigma);
    std::vector<double> v(t.data().begin(), t.data().end());
    for (auto& x : v) x += g(rng);
    return Tensor::from_data(t.shape(), std::move(v));
}

} // namespace

DisplacementField synth_bspline_field(const Shape& spatial, int control, double max_disp, std::uint64_t seed,
                                      SplineOrder order) {
    if (spatial.size() != 3) throw ShapeError("synth_bspline_field: expected {D,H,W}, got " + to_string(spatial));
    if (control < 2) throw std::invalid_argument("synth_bspline_field: control must be >= 2");
    if (!(max_disp >= 0.0)) throw std::invalid_argument("synth_bspline_field: max_disp must be >= 0");
    const std::int64_t D = spatial[0], H = spatial[1], W = spatial[2];
    const std::int64_t n = D * H * W;
    std::mt19937_64 rng(seed);
    const int c3 = control * control * control;
    std::vector<double> lattice(static_cast<std::size_t>(3 * c3));
    for (auto& v : lattice) v = uniform(rng, -1.0, 1.0);

    const auto tz = spline_taps(D, control, order), ty = spline_taps(H, control, order), tx = spline_taps(W, control, order);
    std::vector<double> f(static_cast<std::size_t>(3 * n), 0.0);
    std::int64_t i = 0;
    double max_norm = 0.0;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x, ++i) {
                for (int a = 0; a < 4; ++a)
                    for (int b = 0; b < 4; ++b) {
                        const double wzy = tz[z].weight[a] * ty[y].weight[b];
                        if (wzy == 0.0) continue;
                        for (int c = 0; c < 4; ++c) {
                            const double w = wzy * tx[x].weight[c];
                            if (w == 0.0) continue;
                            const int k = (tz[z].index[a] * control + ty[y].index[b]) * control + tx[x].index[c];
                            for (int ch = 0; ch < 3; ++ch) f[ch * n + i] += w * lattice[ch * c3 + k];
                        }
                    }
                max_norm = std::max(max_norm, std::hypot(f[i], f[n + i], f[2 * n + i]));
            }
    const double scale = max_norm > 0.0 ? max_disp / max_norm : 0.0;
    for (auto& v : f) v *= scale;
    return {Tensor::from_data({3, D, H, W}, std::move(f))};
}

void SynthConfig::validate() const {
    if (spatial.size() != 3 || std::any_of(spatial.begin(), spatial.end(), [](auto e) { return e < 4; })) {
        throw ShapeError("synth: spatial extents must be three values >= 4, got " + to_string(spatial));
    }
    if (channels < 1 || channels > 2) throw std::invalid_argument("synth: channels must be 1 or 2");
    if (n_structures < 1) throw std::invalid_argument("synth: need at least one structure");
    if (!(noise_sigma >= 0.0) || !(max_disp >= 0.0) || !(affine_scale >= 0.0) || !(affine_shift >= 0.0)) {
        throw std::invalid_argument("synth: noise, displacement and affine bounds must be >= 0");
    }
}

namespace {

SyntheticPair deform(const SynthConfig& cfg, const Atlas& atlas, std::uint64_t pair_seed) {
    std::mt19937_64 rng(pair_seed * 0xD1B54A32D192ED03ull + 7);
    std::vector<double> a(9), t(3);
    for (auto& v : a) v = uniform(rng, -cfg.affine_scale, cfg.affine_scale);
    for (auto& v : t) v = uniform(rng, -cfg.affine_shift, cfg.affine_shift);
    // rotate/scale about the grid centre: A*(p - c) + t
    const double c[3] = {(cfg.spatial[2] - 1) / 2.0, (cfg.spatial[1] - 1) / 2.0, (cfg.spatial[0] - 1) / 2.0};
    for (int r = 0; r < 3; ++r) t[r] -= a[3 * r] * c[0] + a[3 * r + 1] * c[1] + a[3 * r + 2] * c[2];
    const AffineParams aff{Tensor::from_data({3, 3}, a), Tensor::from_data({3}, t)};
    const DisplacementField spline = synth_bspline_field(cfg.spatial, 5, cfg.max_disp, rng());
    const DisplacementField gt = compose(apply_affine(aff, cfg.spatial), spline);

    SyntheticPair p;
    p.seed = pair_seed;
    p.gt_field = gt;
    p.fixed = to_volume(add_noise(warp(atlas.image, gt), cfg.noise_sigma, rng));
    p.moving = to_volume(add_noise(atlas.image, cfg.noise_sigma, rng));
    p.masks_moving = to_volume(atlas.masks);
    p.masks_fixed = to_volume(warp(atlas.masks, gt, Interp::nearest));
    return p;
}

} // namespace

SyntheticPair synth_pair(const SynthConfig& cfg, std::uint64_t atlas_seed, std::uint64_t pair_seed) {
    cfg.validate();
    NoGradGuard no_grad;
    return deform(cfg, make_atlas(cfg, atlas_seed), pair_seed);
}

std::vector<SyntheticPair> synth_dataset(const SynthConfig& cfg, int count, std::uint64_t seed) {
    cfg.validate();
    if (count < 0) throw std::invalid_argument("synth_dataset: count must be >= 0");
    NoGradGuard no_grad;
    const Atlas atlas = make_atlas(cfg, seed);
    std::vector<SyntheticPair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(deform(cfg, atlas, seed * 1000003ull + static_cast<std::uint64_t>(i) + 1));
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints

void write_pair(const fs::path& dir, const SyntheticPair& pair) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError(FormatError::Kind::io, "cannot create " + dir.string() + ": " + ec.message());
    write_volume(dir / "moving.dvol", pair.moving);
    write_volume(dir / "fixed.dvol", pair.fixed);
    write_volume(dir / "masks_moving.dvol", pair.masks_moving);
    write_volume(dir / "masks_fixed.dvol", pair.masks_fixed);
    write_volume(dir / "gt_field.dvol", to_volume(pair.gt_field.vectors, pair.fixed.spacing));
    write_text_atomic(dir / "seed.txt", "seed=" + std::to_string(pair.seed) + "\n");
}

SyntheticPair read_pair(const fs::path& dir) {
    SyntheticPair p;
    p.moving = read_volume(dir / "moving.dvol");
    p.fixed = read_volume(dir / "fixed.dvol");
    p.masks_moving = read_volume(dir / "masks_moving.dvol");
    p.masks_fixed = read_volume(dir / "masks_fixed.dvol");
    p.gt_field = DisplacementField{to_tensor(read_volume(dir / "gt_field.dvol"))};
    p.seed = static_cast<std::uint64_t>(KeyValues::parse(read_text(dir / "seed.txt"), (dir / "seed.txt").string()).integer("seed"));
    if (p.moving.shape() != p.fixed.shape() || p.masks_moving.shape() != p.masks_fixed.shape() ||
        p.masks_moving.spatial() != p.moving.spatial() || p.gt_field.vectors.dim(0) != 3 ||
        p.gt_field.spatial() != p.moving.spatial()) {
        throw FormatError(FormatError::Kind::mismatch, dir.string() + ": volumes of one pair disagree in shape");
    }
    return p;
}

std::string pair_dir_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%04d", index);
    return buf;
}

std::vector<fs::path> list_pairs(const fs::path& data_dir) {
    std::error_code ec;
    if (!fs::is_directory(data_dir, ec)) throw FormatError(FormatError::Kind::io, "no data directory " + data_dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(data_dir)) {
        if (e.is_directory() && e.path().filename().string().starts_with("pair_")) out.push_back(e.path());
    }
    if (out.empty()) throw FormatError(FormatError::Kind::io, "no pair_* directories in " + data_dir.string());
    std::sort(out.begin(), out.end());
    return out;
}

const NamedBlob* Checkpoint::find(const std::string& name) const {
    for (const auto& b : blobs) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    Writer w;
    w.put_bytes(kCheckpointMagic, 8);
    w.put(ckpt.version);
    w.put(ckpt.step);
    w.put(static_cast<std::uint32_t>(ckpt.config.size()));
    w.put_bytes(ckpt.config.data(), ckpt.config.size());
    w.put(static_cast<std::uint32_t>(ckpt.blobs.size()));
    std::uint64_t offset = 0;
    for (const auto& b : ckpt.blobs) {
        w.put(static_cast<std::uint32_t>(b.name.size()));
        w.put_bytes(b.name.data(), b.name.size());
        w.put(offset);
        w.put(static_cast<std::uint64_t>(b.values.size()));
        offset += b.values.size();
    }
    for (const auto& b : ckpt.blobs) w.put_bytes(b.values.data(), b.values.size() * sizeof(double));
    write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string what = "checkpoint " + path.string();
    Reader r(read_file(path), what);
    check_magic(r, kCheckpointMagic, what);
    Checkpoint c;
    c.version = r.get<std::uint32_t>();
    if (c.version != kCheckpointVersion) {
        throw FormatError(FormatError::Kind::version, what + ": unsupported version " + std::to_string(c.version));
    }
    c.step = r.get<std::uint64_t>();
    c.config.resize(r.get<std::uint32_t>());
    r.take(c.config.data(), c.config.size());
    const auto count = r.get<std::uint32_t>();
    struct Entry {
        std::uint64_t offset, length;
    };
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedBlob b;
        b.name.resize(r.get<std::uint32_t>());
        r.take(b.name.data(), b.name.size());
        const auto offset = r.get<std::uint64_t>();
        const auto length = r.get<std::uint64_t>();
        entries.push_back({offset, length});
        c.blobs.push_back(std::move(b));
    }
    const std::size_t payload = r.position();
    const std::size_t doubles = r.remaining() / sizeof(double);
    std::vector<double> all(doubles);
    r.take(all.data(), doubles * sizeof(double));
    if (r.remaining() != 0) throw FormatError(FormatError::Kind::mismatch, what + ": payload is not a whole number of doubles");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto [offset, length] = entries[i];
        if (offset > doubles || length > doubles - offset) {
            throw FormatError(FormatError::Kind::truncated, what + ": entry " + c.blobs[i].name + " extends past the payload (starts at byte " +
                                                                std::to_string(payload) + ")");
        }
        c.blobs[i].values.assign(all.begin() + static_cast<std::ptrdiff_t>(offset),
                                 all.begin() + static_cast<std::ptrdiff_t>(offset + length));
    }
    return c;
}

std::vector<NamedBlob> param_blobs(const ParamSet& params) {
    std::vector<NamedBlob> out;
    for (const auto& [name, t] : params) out.push_back({name, std::vector<double>(t.data().begin(), t.data().end())});
    return out;
}

void restore_params(const Checkpoint& ckpt, ParamSet& params, const std::string& ignore_prefix) {
    for (auto& [name, t] : params) {
        const NamedBlob* b = ckpt.find(name);
        if (!b) throw FormatError(FormatError::Kind::mismatch, "checkpoint has no parameter " + name);
        if (static_cast<std::int64_t>(b->values.size()) != t.numel()) {
            throw FormatError(FormatError::Kind::mismatch, "checkpoint parameter " + name + " has " +
                                                               std::to_string(b->values.size()) + " values, model expects " +
                                                               std::to_string(t.numel()) + " for " + to_string(t.shape()));
        }
        std::copy(b->values.begin(), b->values.end(), t.mutable_data().begin());
    }
    for (const auto& b : ckpt.blobs) {
        if (!ignore_prefix.empty() && b.name.rfind(ignore_prefix, 0) == 0) continue;
        if (!params.contains(b.name)) throw FormatError(FormatError::Kind::mismatch, "checkpoint parameter " + b.name + " is not in the model");
    }
}

} // namespace dreg
