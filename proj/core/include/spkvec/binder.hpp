#pragma once

#include <map>
#include <string>

#include "spkvec/params.hpp"
#include "spkvec/tape.hpp"

namespace spkvec {

// Lazily binds store parameters to tape leaves for one forward/backward pass.
// Frozen parameters (and every parameter when not training) bind without
// gradient, which prunes their whole backward subgraph.
class ParamBinder {
public:
    ParamBinder(Tape& tape, ParameterStore& store, bool training)
        : tape_(tape), store_(store), training_(training) {}

    Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const bool needs_grad = training_ && !store_.is_frozen(name);
        const Var v = tape_.leaf(store_.get(name), needs_grad);
        bound_.emplace(name, v);
        return v;
    }

    // Pre-binds a name to an existing tape var (weight tying, finite-difference
    // harnesses). Takes precedence over the store.
    void bind(const std::string& name, Var v) { bound_[name] = v; }

    const std::map<std::string, Var>& bound() const { return bound_; }
    Tape& tape() { return tape_; }
    ParameterStore& store() { return store_; }
    bool training() const { return training_; }

private:
    Tape& tape_;
    ParameterStore& store_;
    bool training_;
    std::map<std::string, Var> bound_;
};

}  // namespace spkvec
