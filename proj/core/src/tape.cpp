#include "spkvec/tape.hpp"

#include <stdexcept>

namespace spkvec {

Var Tape::leaf(Tensor value, bool needs_grad) {
    Entry e;
    e.value = std::move(value);
    e.needs_grad = needs_grad;
    entries_.push_back(std::move(e));
    return Var{static_cast<std::uint32_t>(entries_.size() - 1)};
}

Var Tape::node(Tensor value, bool needs_grad, std::function<void()> backprop) {
    Entry e;
    e.value = std::move(value);
    e.needs_grad = needs_grad;
    if (needs_grad) e.back = std::move(backprop);
    entries_.push_back(std::move(e));
    return Var{static_cast<std::uint32_t>(entries_.size() - 1)};
}

Tensor& Tape::grad(Var v) {
    Entry& e = entries_.at(v.id);
    if (!e.grad_set) {
        e.grad = Tensor(e.value.shape);
        e.grad_set = true;
    }
    return e.grad;
}

const Tensor* Tape::grad_if(Var v) const {
    if (!v.valid()) return nullptr;
    const Entry& e = entries_.at(v.id);
    return e.grad_set ? &e.grad : nullptr;
}

void Tape::backward(Var scalar_loss) {
    if (!scalar_loss.valid() || val(scalar_loss).numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar");
    }
    grad(scalar_loss).data[0] = 1.0;
    for (std::size_t i = entries_.size(); i-- > 0;) {
        Entry& e = entries_[i];
        if (e.grad_set && e.back) e.back();
    }
}

}  // namespace spkvec
