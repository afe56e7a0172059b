#pragma once

#include <stdexcept>
#include <string>

namespace dreg {

// Incompatible extents between operands. The message names every shape involved.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or mismatched on-disk data (volumes, checkpoints, configs).
class FormatError : public std::runtime_error {
public:
    enum class Kind { bad_magic, truncated, version, mismatch, io, syntax };

    FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// NaN/Inf losses, singular affine predictions and similar numerical breakdowns.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dreg
