#include "spkvec/grad_check.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace spkvec {
namespace {

double eval_scalar(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                   const std::vector<Tensor>& inputs) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& in : inputs) vars.push_back(t.leaf(in, false));
    const Var out = build(t, vars);
    if (t.val(out).numel() != 1) {
        throw std::invalid_argument("gradient_check: builder must return a scalar");
    }
    return t.val(out).data[0];
}

[[noreturn]] void fail_non_finite(std::size_t input, Index coord, const char* what) {
    throw std::runtime_error("gradient_check: non-finite " + std::string(what) + " at input " +
                             std::to_string(input) + " coordinate " + std::to_string(coord));
}

}  // namespace

double gradient_check(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                      const std::vector<Tensor>& inputs, double step) {
    // Analytic pass.
    Tape t;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& in : inputs) vars.push_back(t.leaf(in, true));
    const Var out = build(t, vars);
    if (t.val(out).numel() != 1) {
        throw std::invalid_argument("gradient_check: builder must return a scalar");
    }
    if (!std::isfinite(t.val(out).data[0])) fail_non_finite(0, 0, "forward value");
    t.backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor* g = t.grad_if(vars[i]);
        analytic.push_back(g ? *g : Tensor(inputs[i].shape));
    }

    // Numeric pass, coordinate by coordinate.
    double max_rel = 0.0;
    std::vector<Tensor> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (Index c = 0; c < inputs[i].numel(); ++c) {
            const double orig = work[i].data[c];
            work[i].data[c] = orig + step;
            const double fp = eval_scalar(build, work);
            work[i].data[c] = orig - step;
            const double fm = eval_scalar(build, work);
            work[i].data[c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) fail_non_finite(i, c, "perturbed value");
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[i].data[c];
            if (!std::isfinite(a)) fail_non_finite(i, c, "analytic gradient");
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace spkvec
