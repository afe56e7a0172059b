#include "dreg/tensor.hpp"

#include "dreg/autograd.hpp"
#include "dreg/error.hpp"
#include "dreg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace dreg {

using detail::Node;

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->is_leaf = false;
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->inputs.reserve(inputs.size());
            for (const auto& t : inputs) node->inputs.push_back(t.node());
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
    return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = dreg::numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    for (auto e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    }
    if (static_cast<std::int64_t>(data.size()) != dreg::numel(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (node_->data.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) return {};
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data, false); }

void Tensor::backward() const {
    if (!node_) throw ShapeError("backward() on undefined tensor");
    if (node_->data.size() != 1) {
        throw ShapeError("backward() requires a single-element loss, got shape " + to_string(shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf && n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor value) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
}

bool ParamSet::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& ParamSet::get(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.first == name) return e.second;
    }
    throw std::out_of_range("unknown parameter: " + name);
}

Tensor& ParamSet::get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).get(name));
}

std::int64_t ParamSet::total_elements() const { return total_elements(""); }

std::int64_t ParamSet::total_elements(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) {
        if (name.starts_with(prefix)) n += t.numel();
    }
    return n;
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops.

namespace {

struct BroadcastPlan {
    Shape out;
    std::vector<std::int64_t> stride_a;
    std::vector<std::int64_t> stride_b;
    bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a_in, const Shape& b_in, const char* op) {
    BroadcastPlan plan;
    // rank-0 operands act as all-ones extents
    const Shape a = a_in.empty() ? Shape(b_in.size(), 1) : a_in;
    const Shape b = b_in.empty() ? Shape(a_in.size(), 1) : b_in;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    if (a.size() != b.size()) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    const std::size_t r = a.size();
    plan.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
        }
        plan.out[i] = std::max(a[i], b[i]);
    }
    auto strides = [&](const Shape& s) {
        std::vector<std::int64_t> st(r);
        std::int64_t acc = 1;
        for (std::size_t i = r; i-- > 0;) {
            st[i] = s[i] == 1 && plan.out[i] != 1 ? 0 : acc;
            acc *= s[i];
        }
        return st;
    };
    plan.stride_a = strides(a);
    plan.stride_b = strides(b);
    return plan;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
    const std::int64_t n = numel(plan.out);
    if (plan.same) {
        for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = plan.out.size();
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    const std::int64_t inner = plan.out[r - 1];
    const std::int64_t sa = plan.stride_a[r - 1], sb = plan.stride_b[r - 1];
    for (std::int64_t o = 0; o < n; o += inner) {
        for (std::int64_t k = 0; k < inner; ++k) f(o + k, ia + k * sa, ib + k * sb);
        // advance the odometer over all but the innermost axis
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            ia += plan.stride_a[d];
            ib += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            ia -= plan.stride_a[d] * plan.out[d];
            ib -= plan.stride_b[d] * plan.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), name));
    std::vector<double> out(static_cast<std::size_t>(numel(plan->out)));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    switch (op) {
    case BinOp::add: for_each_broadcast(*plan, [&](auto o, auto i, auto j) { out[o] = pa[i] + pb[j]; }); break;
    case BinOp::sub: for_each_broadcast(*plan, [&](auto o, auto i, auto j) { out[o] = pa[i] - pb[j]; }); break;
    case BinOp::mul: for_each_broadcast(*plan, [&](auto o, auto i, auto j) { out[o] = pa[i] * pb[j]; }); break;
    case BinOp::div: for_each_broadcast(*plan, [&](auto o, auto i, auto j) { out[o] = pa[i] / pb[j]; }); break;
    }
    Shape shape = plan->out;
    return detail::make_result(std::move(shape), std::move(out), {a, b}, [plan, op](Node& self) {
        const double* g = self.grad.data();
        const double* va = self.inputs[0]->data.data();
        const double* vb = self.inputs[1]->data.data();
        double* ga = self.input_grad(0);
        double* gb = self.input_grad(1);
        switch (op) {
        case BinOp::add:
            for_each_broadcast(*plan, [&](auto o, auto i, auto j) {
                if (ga) ga[i] += g[o];
                if (gb) gb[j] += g[o];
            });
            break;
        case BinOp::sub:
            for_each_broadcast(*plan, [&](auto o, auto i, auto j) {
                if (ga) ga[i] += g[o];
                if (gb) gb[j] -= g[o];
            });
            break;
        case BinOp::mul:
            for_each_broadcast(*plan, [&](auto o, auto i, auto j) {
                if (ga) ga[i] += g[o] * vb[j];
                if (gb) gb[j] += g[o] * va[i];
            });
            break;
        case BinOp::div:
            for_each_broadcast(*plan, [&](auto o, auto i, auto j) {
                if (ga) ga[i] += g[o] / vb[j];
                if (gb) gb[j] -= g[o] * va[i] / (vb[j] * vb[j]);
            });
            break;
        }
    });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    return detail::make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const auto& x = self.inputs[0]->data;
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[i] * deriv(x[i], self.data[i]);
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div, "div"); }

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor sum(const Tensor& a) {
    const double total = kernels::sum(a.data());
    return detail::make_result({}, {total}, {a}, [](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        const double g = self.grad[0];
        const std::size_t n = self.inputs[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw ShapeError("concat: " + to_string(first) + " vs " + to_string(s));
        out_shape[axis] += s[axis];
    }
    // outer = product of extents before axis; each part contributes a block of
    // extent[axis] * inner per outer index.
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    std::vector<std::int64_t> blocks;
    for (const auto& p : parts) blocks.push_back(p.shape()[axis] * inner);
    const std::int64_t out_block = out_shape[axis] * inner;

    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double* src = parts[k].data().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * blocks[k], blocks[k], out.data() + o * out_block + offset);
        }
        offset += blocks[k];
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_result(std::move(out_shape), std::move(out), inputs,
                               [blocks, outer, out_block](Node& self) {
                                   std::int64_t offset = 0;
                                   for (std::size_t k = 0; k < blocks.size(); ++k) {
                                       if (double* gx = self.input_grad(k)) {
                                           for (std::int64_t o = 0; o < outer; ++o) {
                                               const double* g = self.grad.data() + o * out_block + offset;
                                               double* dst = gx + o * blocks[k];
                                               for (std::int64_t i = 0; i < blocks[k]; ++i) dst[i] += g[i];
                                           }
                                       }
                                       offset += blocks[k];
                                   }
                               });
}

Tensor slice(const Tensor& a, std::int64_t begin, std::int64_t end) {
    if (a.rank() == 0 || begin < 0 || end > a.dim(0) || begin > end) {
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         to_string(a.shape()));
    }
    const std::int64_t inner = a.numel() / std::max<std::int64_t>(a.dim(0), 1);
    Shape shape = a.shape();
    shape[0] = end - begin;
    std::vector<double> out(a.data().begin() + begin * inner, a.data().begin() + end * inner);
    return detail::make_result(std::move(shape), std::move(out), {a}, [begin, inner](Node& self) {
        double* gx = self.input_grad(0);
        if (!gx) return;
        gx += begin * inner;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const TensorFn& fn, std::vector<Tensor> inputs, const GradCheckOptions& options) {
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    for (auto& t : inputs) t.zero_grad();
    Tensor out = fn(inputs);
    std::vector<double> proj(static_cast<std::size_t>(out.numel()));
    for (auto& r : proj) r = unit(rng);
    Tensor loss = sum(mul(out, Tensor::from_data(out.shape(), proj)));
    loss.backward();

    auto evaluate = [&]() {
        NoGradGuard guard;
        Tensor o = fn(inputs);
        double acc = 0.0;
        for (std::size_t i = 0; i < proj.size(); ++i) acc += o.data()[i] * proj[i];
        return acc;
    };

    const double base = options.kink_tolerant ? evaluate() : 0.0;
    GradCheckResult result;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const auto n = static_cast<std::size_t>(t.numel());
        std::vector<double> analytic(n, 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > options.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        auto values = t.mutable_data();
        for (std::size_t c : coords) {
            const double saved = values[c];
            const double h = options.step;
            values[c] = saved + h;
            const double plus = evaluate();
            values[c] = saved - h;
            const double minus = evaluate();
            double central = (plus - minus) / (2.0 * h);
            if (options.five_point) {
                values[c] = saved + 2.0 * h;
                const double plus2 = evaluate();
                values[c] = saved - 2.0 * h;
                const double minus2 = evaluate();
                central = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * h);
            }
            values[c] = saved;
            double numeric = central;
            double abs_err = std::abs(numeric - analytic[c]);
            if (options.kink_tolerant) {
                for (double side : {(plus - base) / options.step, (base - minus) / options.step}) {
                    const double e = std::abs(side - analytic[c]);
                    if (e < abs_err) {
                        abs_err = e;
                        numeric = side;
                    }
                }
                if (numeric != central) ++result.one_sided;
            }
            const double denom = std::max({std::abs(numeric), std::abs(analytic[c]), options.floor});
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
            ++result.checked;
        }
    }
    return result;
}

} // namespace dreg
