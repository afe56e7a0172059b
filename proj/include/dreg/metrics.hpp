#pragma once

// Evaluation-only measures. Nothing here records gradients.
//
// Volumes are single-channel [D, H, W] or [1, D, H, W] tensors. A mask voxel is
// "in" when its value exceeds 0.5.

#include "dreg/fieldops.hpp"
#include "dreg/tensor.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

namespace dreg {

using Spacing = std::array<double, 3>; // x, y, z in mm per voxel

// 2|A & B| / (|A| + |B|); 1 when both are empty.
double dice_score(const Tensor& a, const Tensor& b);

// Directed max_{a in surf A} min_{b in surf B} |a - b|, or the max of both
// directions when `symmetric`. Surface voxels have a 6-neighbour outside the
// mask or outside the grid. Throws std::invalid_argument on an empty mask.
double hausdorff(const Tensor& a, const Tensor& b, const Spacing& spacing = {1, 1, 1}, bool symmetric = false);

// Mean surface-to-surface distance pooled over both directions.
double assd(const Tensor& a, const Tensor& b, const Spacing& spacing = {1, 1, 1});

// Optional foreground masks select voxels where the mask is nonzero.
double ncc(const Tensor& a, const Tensor& b, const Tensor* mask = nullptr);
// H(A) + H(B) - H(A, B) from a bins x bins histogram of intensities in [0, 1]
// (values outside are clamped), natural log.
double mutual_information(const Tensor& a, const Tensor& b, const Tensor* mask = nullptr, int bins = 32);
double entropy(const Tensor& a, const Tensor* mask = nullptr, int bins = 32);
double mse(const Tensor& a, const Tensor& b, const Tensor* mask = nullptr);

// Foreground of a fixed image: value > 0.
Tensor foreground_mask(const Tensor& fixed);

using ImageMetric = std::function<double(const Tensor& moved, const Tensor& fixed)>;

// Mean of the metric over the channels of [C, D, H, W] moved/fixed volumes.
double modality_average(const ImageMetric& metric, const Tensor& moved, const Tensor& fixed);

struct MetricReport {
    std::optional<double> dice, hd, assd;
    double ncc = 0.0, mi = 0.0, mse = 0.0;
    std::optional<double> jacobian_std, folding_fraction;

    void write(std::ostream& os) const;
    static MetricReport read(std::istream& is);
};

struct EvalInputs {
    Tensor moved; // [C, D, H, W]
    Tensor fixed; // [C, D, H, W]
    // Region metrics need both: moving masks are warped with nearest
    // interpolation by `transform` before comparison.
    std::optional<Tensor> masks_moving;
    std::optional<Tensor> masks_fixed;
    std::optional<DisplacementField> transform;
    // Deformable field for the smoothness metrics.
    std::optional<DisplacementField> phi_def;
    Spacing spacing{1, 1, 1};
};

// Image metrics over the fixed image's foreground, modality averaged; region
// metrics averaged over structures (HD/ASSD skip structures with an empty
// side).
MetricReport evaluate(const EvalInputs& in);

} // namespace dreg
