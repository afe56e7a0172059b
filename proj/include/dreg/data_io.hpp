#pragma once

// Volume and checkpoint containers, normalization, and synthetic pairs.
//
// DREGVOL1 layout (little-endian): "DREGVOL1", u32 version, u32 C, u32 D,
// u32 H, u32 W, f64 spacing x/y/z, then C*D*H*W f32 values, channel-major.
//
// DREGCKP1 layout (little-endian): "DREGCKP1", u32 version, u64 step,
// u32 config length, config bytes, u32 entry count, then per entry
// (u32 name length, name bytes, u64 offset, u64 length), then the payload of
// f64 values. Offsets and lengths count doubles from the payload start.

#include "dreg/fieldops.hpp"
#include "dreg/metrics.hpp"
#include "dreg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dreg {

struct Volume {
    std::int64_t channels = 0, depth = 0, height = 0, width = 0;
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<float> data;

    Shape shape() const { return {channels, depth, height, width}; }
    Shape spatial() const { return {depth, height, width}; }
    // Throws ShapeError / std::invalid_argument when the invariants fail.
    void validate() const;
};

Tensor to_tensor(const Volume& v);
// Values are rounded to f32.
Volume to_volume(const Tensor& t, const Spacing& spacing = {1.0, 1.0, 1.0});

inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writers go through a temporary sibling file and an atomic rename.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

// Whole-file text helpers; the writer uses the same temp-and-rename path.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Raw little-endian f32 payload plus a key=value side-car header with keys
// channels, depth, height, width and optional spacing_x/y/z.
Volume import_raw(const std::filesystem::path& raw, const std::filesystem::path& header);

// Per channel (x - min) / (max - min); constant channels become zero.
Volume normalize_minmax(const Volume& v);

enum class SplineOrder { cubic, linear };

// Uniform random control vectors on a control^3 lattice spanning the grid,
// interpolated with B-spline weights and rescaled so the largest vector norm
// equals max_disp. Deterministic per seed.
DisplacementField synth_bspline_field(const Shape& spatial, int control = 5, double max_disp = 12.0,
                                      std::uint64_t seed = 0, SplineOrder order = SplineOrder::cubic);

struct SynthConfig {
    Shape spatial{48, 48, 48};
    std::int64_t channels = 1;
    int n_structures = 3;
    double noise_sigma = 0.02;
    double max_disp = 8.0;
    double affine_scale = 0.04; // bound on |A*| entries, about the grid centre
    double affine_shift = 1.5;  // bound on translation components, voxels

    void validate() const;
};

struct SyntheticPair {
    Volume moving, fixed;
    Volume masks_moving, masks_fixed; // one binary channel per structure
    DisplacementField gt_field;       // fixed = warp(moving_clean, gt_field) + noise
    std::uint64_t seed = 0;
};

// The moving image is an atlas drawn from `atlas_seed`; the deformation and
// noise come from `pair_seed`.
SyntheticPair synth_pair(const SynthConfig& cfg, std::uint64_t atlas_seed, std::uint64_t pair_seed);
inline SyntheticPair synth_pair(const SynthConfig& cfg, std::uint64_t seed) { return synth_pair(cfg, seed, seed); }
// `count` pairs sharing one atlas.
std::vector<SyntheticPair> synth_dataset(const SynthConfig& cfg, int count, std::uint64_t seed);

// On-disk pair layout: <dir>/{moving,fixed,masks_moving,masks_fixed,gt_field}.dvol
// plus seed.txt. Fields are stored as 3-channel volumes.
void write_pair(const std::filesystem::path& dir, const SyntheticPair& pair);
SyntheticPair read_pair(const std::filesystem::path& dir);
// Sorted pair_* subdirectories; FormatError(io) when the directory is missing
// or holds no pairs.
std::vector<std::filesystem::path> list_pairs(const std::filesystem::path& data_dir);
std::string pair_dir_name(int index);

struct NamedBlob {
    std::string name;
    std::vector<double> values;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config;
    std::uint64_t step = 0;
    std::vector<NamedBlob> blobs;

    const NamedBlob* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Blobs named after parameters, in ParamSet order.
std::vector<NamedBlob> param_blobs(const ParamSet& params);
// Copies blobs into the parameters. Every parameter needs a blob of matching
// length; extra blobs whose names start with `ignore_prefix` are skipped and
// any other extra blob is a mismatch. Throws FormatError(mismatch).
void restore_params(const Checkpoint& ckpt, ParamSet& params, const std::string& ignore_prefix = "adam.");

} // namespace dreg
