#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "spkvec/tensor.hpp"

namespace spkvec {

// Handle into a Tape. Invalid by default so optional inputs (e.g. a conv
// without bias) can be expressed as Var{}.
struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

// Reverse-mode gradient tape. Operations append nodes in program order;
// backward() replays the recorded closures in reverse. One tape serves one
// forward/backward pass over one batch and is not shared across threads
// (ops may parallelize internally).
class Tape {
public:
    Var leaf(Tensor value, bool needs_grad = false);

    // Registers an op result. The closure reads grad(out) and accumulates
    // into the parents' grads; it runs only if grad(out) was populated.
    Var node(Tensor value, bool needs_grad, std::function<void()> backprop);

    const Tensor& val(Var v) const { return entries_.at(v.id).value; }
    bool needs_grad(Var v) const { return v.valid() && entries_.at(v.id).needs_grad; }

    // Grad tensor for v, allocated as zeros on first use.
    Tensor& grad(Var v);
    // Grad if one was accumulated during backward, else nullptr.
    const Tensor* grad_if(Var v) const;
    bool has_grad(Var v) const { return v.valid() && entries_.at(v.id).grad_set; }

    // Seeds d(loss)/d(loss) = 1 for a scalar loss and runs all recorded
    // closures in reverse order.
    void backward(Var scalar_loss);

    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        bool needs_grad = false;
        bool grad_set = false;
    };
    std::vector<Entry> entries_;
};

}  // namespace spkvec
