#pragma once

// Building blocks for writing differentiable operations outside tensor.cpp.

#include "dreg/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

namespace dreg::detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }

    // Gradient buffer of input i, or nullptr when that input is not tracked.
    double* input_grad(std::size_t i) {
        Node& in = *inputs[i];
        return in.requires_grad ? in.ensure_grad().data() : nullptr;
    }
};

// Wraps freshly computed output values. The backward closure is recorded only
// when grad mode is on and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

void require_rank(const Tensor& t, std::size_t rank, const char* what);

} // namespace dreg::detail
