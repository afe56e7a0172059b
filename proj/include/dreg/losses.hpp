#pragma once

// Training objectives. Every loss returns a rank-0 tensor that participates
// in autodiff.

#include "dreg/fieldops.hpp"
#include "dreg/tensor.hpp"

#include <optional>

namespace dreg {

struct LossWeights {
    double alpha1 = 0.1; // affine
    double alpha2 = 1.0; // smoothness
    double alpha3 = 1.0; // similarity
    double alpha4 = 2.0; // segmentation

    void validate() const;
};

// With M = A* + I and S = M^T M:
//   -6 + tr(S) + tr(S^-1) + (det M - 1)^2
// Zero exactly for rotations; penalizes scaling, shear and reflections.
// Throws NumericalError when det(S) < 1e-12.
Tensor affine_loss(const Tensor& a_star);

// Mean over voxels of the squared forward differences of every channel along
// every axis; differences across the last slice count as zero.
Tensor smoothness_loss(const DisplacementField& field);

// Pearson correlation over all elements: Sxy / sqrt(Sxx * Syy + 1e-8), with
// S the centred sums. Constant inputs give 0.
Tensor pearson(const Tensor& x, const Tensor& y);

constexpr int kPatch = 8;
constexpr int kPatchStride = 3;

// Sum over channels of the mean over 8^3 patches (stride 3, trailing partial
// windows dropped) of -pearson(patch_m, patch_f)^2. Inputs are [C, D, H, W]
// with C in {1, 2}.
Tensor nlcc_loss(const Tensor& moved, const Tensor& fixed);

// -(1/C) sum_c (2 sum(a b) + eps) / (sum a + sum b + eps), eps = 1e-5.
Tensor soft_dice_loss(const Tensor& warped_m, const Tensor& masks_f);

// Moving masks are warped trilinearly by phi_aff then phi_def and compared
// with soft_dice_loss.
Tensor dice_loss(const Tensor& masks_m, const Tensor& masks_f, const DisplacementField& phi_aff,
                 const DisplacementField& phi_def);

struct LossParts {
    Tensor aff;
    Tensor reg;
    Tensor sim;
    std::optional<Tensor> seg; // absent in unsupervised mode
};

Tensor total_loss(const LossParts& parts, const LossWeights& weights);

} // namespace dreg
