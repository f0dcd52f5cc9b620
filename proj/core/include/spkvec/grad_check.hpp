#pragma once

#include <functional>
#include <vector>

#include "spkvec/tape.hpp"

namespace spkvec {

// Central finite-difference check of a scalar-valued graph builder. The
// builder receives a tape plus one Var per input tensor and must return a
// scalar; it must be deterministic (dropout in eval mode, LayerDrop off).
// Returns the maximum relative error |analytic - numeric| / max(1, |numeric|)
// over every input coordinate. Non-finite values anywhere raise with the
// offending coordinate.
double gradient_check(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                      const std::vector<Tensor>& inputs, double step = 1e-4);

}  // namespace spkvec
