#pragma once

// Finite-difference audit of every differentiable operation, shared by the
// command line and the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

namespace dreg {

struct GradCheckEntry {
    std::string name;
    double tolerance = 0.0;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

struct GradCheckReport {
    std::uint64_t seed = 0;
    std::vector<GradCheckEntry> entries;
    bool passed() const;
    // One line per case: name, max relative error, tolerance, PASS/FAIL.
    std::string to_text() const;
};

// Pointwise ops and losses are held to 1e-4; anything that samples
// trilinearly, the fusion blocks and the whole network to 1e-3.
constexpr double kOpTolerance = 1e-4;
constexpr double kSamplingTolerance = 1e-3;

std::vector<std::string> gradcheck_case_names();

// Runs every case. A non-empty `fault` names a case whose output is routed
// through an identity op with a deliberately wrong backward pass, so the
// harness itself can be shown to catch a broken gradient.
GradCheckReport run_gradcheck(std::uint64_t seed, const std::string& fault = "");

} // namespace dreg
