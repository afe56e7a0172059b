#pragma once

// Deformation-field algebra.
//
// Fields are [3, D, H, W] tensors in voxel units of their own grid. Channel 0
// is the x displacement (along W), channel 1 is y (along H), channel 2 is z
// (along D). A displacement field phi maps voxel p to p + phi(p); warping a
// volume I by phi produces I(p + phi(p)).

#include "dreg/tensor.hpp"

#include <array>

namespace dreg {

struct DisplacementField {
    Tensor vectors;

    Shape spatial() const { return {vectors.dim(1), vectors.dim(2), vectors.dim(3)}; }
};

struct VelocityField {
    Tensor vectors;

    Shape spatial() const { return {vectors.dim(1), vectors.dim(2), vectors.dim(3)}; }
};

// Residual affine parameters: the realized map is p -> (A* + I) p + t.
struct AffineParams {
    Tensor a_star;      // [3, 3], row-major, rows/cols ordered x, y, z
    Tensor translation; // [3]

    static AffineParams identity();
    // det(A* + I) of the current values.
    double linear_determinant() const;
};

enum class Interp { trilinear, nearest };

// [3, D, H, W] with channel c holding the integer coordinate along axis c.
Tensor identity_grid(const Shape& spatial);

DisplacementField zero_field(const Shape& spatial);

// Trilinear warping is differentiable in both arguments. Nearest rounds
// p + phi(p) half-up and clamps to the grid; use it for label maps.
Tensor warp(const Tensor& volume, const DisplacementField& field, Interp interp = Interp::trilinear);

// result(p) = inner(p) + outer(p + inner(p)), so that
// warp(warp(I, outer), inner) == warp(I, compose(outer, inner)).
DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner);

// Scaling and squaring: phi = V / 2^t, then t self-compositions.
DisplacementField integrate_velocity(const VelocityField& velocity, int t_steps = 7);

// Linear spatial upsampling by `factor` followed by multiplying the vectors by
// `factor` to convert to the finer grid's voxel units.
VelocityField upsample_field(const VelocityField& field, int factor);
DisplacementField upsample_field(const DisplacementField& field, int factor);

// field(p) = A* p + t, differentiable in the parameters.
DisplacementField apply_affine(const AffineParams& params, const Shape& spatial);

// det(I + grad phi) per voxel, [1, D, H, W]. Forward differences, backward at
// the last index of each axis. Extents must be >= 2.
Tensor jacobian_map(const DisplacementField& field);

struct SmoothnessReport {
    double jacobian_std = 0.0;
    double folding_fraction = 0.0;
};

SmoothnessReport smoothness_report(const DisplacementField& field);

// 3x3 helpers on row-major arrays.
double det3(const std::array<double, 9>& m);

} // namespace dreg
