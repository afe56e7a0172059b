#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every Tensor is a handle onto a graph node. Operations that consume at least
// one gradient-tracking input record a backward closure and keep their inputs
// alive; calling backward() on a scalar walks the reachable graph in reverse
// topological order. Feature maps use the layout [C, D, H, W] (channel, depth,
// height, width), row-major with width fastest.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dreg {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::int64_t dim(std::size_t axis) const { return shape().at(axis); }
    std::size_t rank() const { return shape().size(); }
    std::int64_t numel() const;

    std::span<const double> data() const;
    // Writable view of a leaf's values (parameters, inputs). Mutating a tensor
    // that already feeds a recorded graph invalidates that graph.
    std::span<double> mutable_data();
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    bool has_grad() const;
    // Empty span when no gradient has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Copy of the values as a fresh leaf with no history.
    Tensor detach() const;

    // Seeds d(self)/d(self) = 1 and accumulates into every reachable leaf that
    // requires grad. Gradients of leaves add up across calls; intermediate
    // gradients are recomputed from scratch each call.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Ordered, uniquely named parameter collection. Iteration order is
// registration order.
class ParamSet {
public:
    Tensor& add(const std::string& name, Tensor value);
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    bool contains(const std::string& name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    std::int64_t total_elements() const;
    std::int64_t total_elements(const std::string& prefix) const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();

private:
    std::deque<std::pair<std::string, Tensor>> entries_; // add() returns references that stay valid
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops broadcast operands of equal rank whose
// extents match or are 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis = 0);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis = 0);
// Leading-axis slice [begin, end).
Tensor slice(const Tensor& a, std::int64_t begin, std::int64_t end);

// ---------------------------------------------------------------------------
// Network layers.

// weight [C_out, C_in, k, k, k], bias [C_out] or undefined.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

// Kernel 4, stride 2, padding 1: every spatial extent doubles.
// weight [C_in, C_out, 4, 4, 4], bias [C_out] or undefined.
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Per-channel spatial standardization, no affine parameters.
Tensor instance_norm(const Tensor& input, double eps = 1e-5);

// Derivative at exactly zero is 1.
Tensor leaky_relu(const Tensor& input, double slope = 0.1);
Tensor sigmoid(const Tensor& input);
Tensor softmax(const Tensor& input, std::size_t axis);

// input [n], weight [m, n], bias [m].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// [C, D, H, W] -> [C]
Tensor global_avg_pool(const Tensor& input);

// ---------------------------------------------------------------------------
// Resampling.

enum class Boundary { clamp, zeros };

// Trilinear lookup of volume [C, D, H, W] at absolute voxel coordinates
// locations [3, D', H', W'] (channel 0 = x along W, 1 = y along H, 2 = z along
// D). Differentiable with respect to both arguments.
Tensor grid_sample(const Tensor& volume, const Tensor& locations, Boundary boundary = Boundary::clamp);

// Linear interpolation of every spatial axis to factor x extents, sampling
// source coordinate (o + 0.5) / factor - 0.5 clamped to the valid range.
Tensor upsample_linear(const Tensor& input, int factor);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckOptions {
    double step = 1e-5;
    // Coordinates probed per input; all of them when the input is smaller.
    std::size_t max_coords = 64;
    // Denominator floor for the relative error.
    double floor = 1e-6;
    std::uint64_t seed = 7;
    // For piecewise-smooth functions (leaky ReLU, trilinear sampling): when a
    // probe straddles a kink the central difference averages two slopes, so a
    // coordinate is scored by the best of the central and both one-sided
    // differences.
    bool kink_tolerant = false;
    // Fourth-order central difference: with a step near 1e-3 both truncation
    // and rounding stay around 1e-12, so gradients of tiny magnitude can be
    // held to a tight relative error.
    bool five_point = false;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    // Coordinates scored by a one-sided difference (kink_tolerant only).
    std::size_t one_sided = 0;
};

using TensorFn = std::function<Tensor(std::span<const Tensor>)>;

// Compares analytic gradients of sum(f(inputs) * R), R a fixed random
// projection, against central differences on a random subset of coordinates
// of every input with requires_grad set.
GradCheckResult grad_check(const TensorFn& fn, std::vector<Tensor> inputs, const GradCheckOptions& options = {});

} // namespace dreg
