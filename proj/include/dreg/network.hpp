#pragma once

// The registration model: affine sub-network, dual encoder, and a single
// decoder that alternates velocity fusion (DFI) and attention-based feature
// fusion (NFF) at each level.
//
// Level indices follow the decoder: level 0 is the coarsest (1/8 resolution),
// level 3 is full resolution. E^l has encoder_widths[3 - l] channels.

#include "dreg/fieldops.hpp"
#include "dreg/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dreg {

inline constexpr int kLevels = 4;

struct NetConfig {
    std::int64_t input_channels = 1;
    std::array<std::int64_t, kLevels> encoder_widths{8, 16, 32, 64};
    std::array<std::int64_t, 5> affine_widths{8, 16, 32, 64, 64};
    int t_steps = 7;
    double leaky_slope = 0.1;
    int nff_spatial_kernel = 3;

    void validate() const;
    // Flat key=value text, one key per line, stable order.
    std::string to_text() const;
    static NetConfig from_text(const std::string& text);
    bool operator==(const NetConfig&) const = default;
};

struct EncoderPyramid {
    std::array<Tensor, kLevels> levels; // levels[0] coarsest ... levels[3] full resolution
};

struct DfiResult {
    VelocityField fused;       // V^l
    DisplacementField field;   // Phi^l = exp(V^l)
    std::vector<Tensor> gates; // p_0 .. p_{l-1}, each [1, D, H, W]
};

struct RegistrationResult {
    AffineParams affine;
    DisplacementField phi_aff;
    std::vector<VelocityField> velocities; // v^0 .. v^3 of the last cascade
    DisplacementField phi_def;             // full resolution, composed over cascades
    Tensor affine_moved;                   // warp(I_m, phi_aff)
    Tensor moved;                          // warp(affine_moved, phi_def)
};

class RegistrationNet {
public:
    // Kaiming fan-in initialization from a fixed-seed generator; the affine
    // head starts at zero so the initial affine map is the identity.
    explicit RegistrationNet(NetConfig cfg, std::uint64_t seed = 1);

    const NetConfig& config() const noexcept { return cfg_; }
    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }

    // Parameter names of the deformable part start with one of these.
    static bool is_affine_param(const std::string& name);
    std::int64_t deformable_parameter_count() const;

    // `branch` is "enc_m" or "enc_f". Extents must be divisible by 8.
    EncoderPyramid encode(const Tensor& image, const std::string& branch) const;

    // Fuses v^0..v^{stage-1} (v^m at level m) at the resolution of level
    // min(stage, 3) and integrates the sum. Stage 4 is the final
    // full-resolution pass. `unit_weights` replaces the gates by ones.
    DfiResult dfi(const std::vector<VelocityField>& velocities, int stage, bool unit_weights = false) const;

    // Attention fusion at decoder level `level` (1..3).
    Tensor nff(const Tensor& e_m_warped, const Tensor& e_f, const Tensor& d_prev_up, int level) const;

    VelocityField velocity_head(const Tensor& d, int level) const;

    AffineParams affine_net(const Tensor& moving, const Tensor& fixed) const;

    // The deformable part on an already affinely aligned pair.
    struct Deformable {
        std::vector<VelocityField> velocities;
        DisplacementField phi_def;
    };
    Deformable deformable(const Tensor& moving, const Tensor& fixed) const;

    RegistrationResult forward(const Tensor& moving, const Tensor& fixed, int cascades = 1) const;

    static constexpr int kFinalStage = kLevels; // dfi stage producing phi_def

private:
    Tensor conv(const Tensor& x, const std::string& name, int stride, int padding) const;
    Tensor act(const Tensor& x) const;
    Tensor resblock(const Tensor& x, const std::string& name, bool norm) const;

    NetConfig cfg_;
    ParamSet params_;
};

} // namespace dreg
