#include "spkvec/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace spkvec {

ScheduleKind schedule_from_name(const std::string& name) {
    if (name == "constant") return ScheduleKind::constant;
    if (name == "exponential_decay") return ScheduleKind::exponential_decay;
    if (name == "one_cycle") return ScheduleKind::one_cycle;
    if (name == "tri_stage") return ScheduleKind::tri_stage;
    throw std::invalid_argument("unknown schedule '" + name +
                                "' (expected constant, exponential_decay, one_cycle, tri_stage)");
}

std::string schedule_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::exponential_decay: return "exponential_decay";
        case ScheduleKind::one_cycle: return "one_cycle";
        case ScheduleKind::tri_stage: return "tri_stage";
    }
    throw std::logic_error("unreachable schedule kind");
}

std::vector<std::string> validate_schedule(const ScheduleSpec& spec) {
    std::vector<std::string> bad;
    if (spec.total_steps == 0) bad.push_back("schedule: total_steps must be >= 1");
    auto pos = [&](double v, const char* name) {
        if (!(v > 0.0)) bad.push_back(std::string("schedule: ") + name + " must be positive");
    };
    switch (spec.kind) {
        case ScheduleKind::constant:
            pos(spec.lr, "lr");
            break;
        case ScheduleKind::exponential_decay:
            pos(spec.lr_start, "lr_start");
            pos(spec.lr_end, "lr_end");
            break;
        case ScheduleKind::one_cycle:
            pos(spec.max_lr, "max_lr");
            pos(spec.start_div, "start_div");
            pos(spec.final_div, "final_div");
            if (!(spec.warmup_fraction > 0.0 && spec.warmup_fraction < 1.0)) {
                bad.push_back("schedule: warmup_fraction must lie in (0, 1)");
            }
            break;
        case ScheduleKind::tri_stage:
            pos(spec.lr_floor_init, "lr_floor_init");
            pos(spec.lr_peak, "lr_peak");
            pos(spec.lr_floor_final, "lr_floor_final");
            if (spec.warmup_steps + spec.hold_steps >= spec.total_steps) {
                bad.push_back("schedule: warmup + hold must leave room for the decay stage");
            }
            break;
    }
    return bad;
}

double lr_at(const ScheduleSpec& spec, Index step) {
    if (spec.total_steps == 0 || step >= spec.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(spec.total_steps) + ")");
    }
    const Index last = spec.total_steps - 1;
    switch (spec.kind) {
        case ScheduleKind::constant:
            return spec.lr;
        case ScheduleKind::exponential_decay: {
            if (step == 0) return spec.lr_start;
            if (step == last) return spec.lr_end;
            const double r = static_cast<double>(step) / static_cast<double>(last);
            return spec.lr_start * std::pow(spec.lr_end / spec.lr_start, r);
        }
        case ScheduleKind::one_cycle: {
            if (spec.total_steps == 1) return spec.max_lr;
            const double lr0 = spec.max_lr / spec.start_div;
            const double lr_final = spec.max_lr / spec.final_div;
            Index peak = static_cast<Index>(
                std::llround(spec.warmup_fraction * static_cast<double>(last)));
            peak = std::clamp<Index>(peak, 1, last);
            if (step < peak) {
                return lr0 + (spec.max_lr - lr0) *
                                 (static_cast<double>(step) / static_cast<double>(peak));
            }
            if (step == peak) return spec.max_lr;
            if (step == last) return lr_final;
            const double t =
                static_cast<double>(step - peak) / static_cast<double>(last - peak);
            return lr_final + (spec.max_lr - lr_final) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
        }
        case ScheduleKind::tri_stage: {
            const Index warm_end = spec.warmup_steps;
            const Index hold_end = spec.warmup_steps + spec.hold_steps;
            if (step >= warm_end && step <= hold_end) return spec.lr_peak;
            if (step < warm_end) {
                return spec.lr_floor_init +
                       (spec.lr_peak - spec.lr_floor_init) *
                           (static_cast<double>(step) / static_cast<double>(warm_end));
            }
            if (step == last) return spec.lr_floor_final;
            const double r = static_cast<double>(step - hold_end) /
                             static_cast<double>(last - hold_end);
            return spec.lr_peak * std::pow(spec.lr_floor_final / spec.lr_peak, r);
        }
    }
    throw std::logic_error("unreachable schedule kind");
}

double reference_max_lr(Variant v) {
    switch (v) {
        case Variant::ce: return 9e-5;
        case Variant::aam: return 5e-5;
        case Variant::bce: return 3e-5;
    }
    throw std::logic_error("unreachable variant");
}

void adam_step(ParameterStore& store, const std::map<std::string, Tensor>& grads,
               const AdamConfig& cfg, double lr, AdamState& state) {
    // Validate everything before touching any state: a rejected step must
    // leave parameters and moments untouched.
    for (const auto& [name, grad] : grads) {
        const Tensor& param = store.get(name);
        if (!grad.same_shape(param)) {
            throw std::invalid_argument("adam_step: gradient for " + name + " has shape " +
                                        shape_str(grad.shape) + ", parameter is " +
                                        shape_str(param.shape));
        }
        if (store.is_frozen(name)) continue;
        for (double g : grad.data) {
            if (!std::isfinite(g)) {
                throw std::runtime_error("adam_step: non-finite gradient in " + name +
                                         "; step rejected");
            }
        }
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const auto& [name, grad] : grads) {
        if (store.is_frozen(name)) continue;
        Tensor& param = store.get(name);
        Tensor& m = state.m.try_emplace(name, Tensor(param.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(param.shape)).first->second;
        for (Index i = 0; i < param.numel(); ++i) {
            const double g = grad.data[i] + cfg.weight_decay * param.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m.data[i] / bc1;
            const double v_hat = v.data[i] / bc2;
            param.data[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

RangeTestResult lr_range_test(const std::function<double(double)>& step_fn, Index steps,
                              double min_lr, double max_lr) {
    if (steps < 2) throw std::invalid_argument("lr_range_test: need at least 2 steps");
    if (!(min_lr > 0.0) || !(max_lr > min_lr)) {
        throw std::invalid_argument("lr_range_test: need 0 < min_lr < max_lr");
    }
    RangeTestResult out;
    double ema = 0.0;
    const double beta = 0.98;
    for (Index i = 0; i < steps; ++i) {
        const double r = static_cast<double>(i) / static_cast<double>(steps - 1);
        const double lr = min_lr * std::pow(max_lr / min_lr, r);
        const double loss = step_fn(lr);
        if (!std::isfinite(loss)) {
            out.diverged = true;  // keep the partial curve
            break;
        }
        ema = beta * ema + (1.0 - beta) * loss;
        const double smoothed = ema / (1.0 - std::pow(beta, static_cast<double>(i + 1)));
        out.rows.push_back({i, lr, loss, smoothed});
    }
    const Index n = out.rows.size();
    if (n < 3) return out;

    // Slope of the smoothed log-loss by central difference; losses here are
    // positive (cross-entropy / BCE), guard anyway.
    std::vector<double> logs(n);
    for (Index i = 0; i < n; ++i) logs[i] = std::log(std::max(out.rows[i].smoothed_loss, 1e-300));
    Index best = 0;
    double best_slope = 0.0;
    for (Index i = 1; i + 1 < n; ++i) {
        const double slope = (logs[i + 1] - logs[i - 1]) / 2.0;
        if (slope < best_slope) {
            best_slope = slope;
            best = i;
        }
    }
    if (best_slope >= 0.0) return out;  // loss never decreased: no suggestion

    Index started = 0;
    while (started + 1 < n && out.rows[started + 1].smoothed_loss >= out.rows[started].smoothed_loss) {
        ++started;
    }
    started = std::min<Index>(started + 1, n - 1);  // first step the loss fell
    Index stopped = 0;
    for (Index i = 1; i < n; ++i) {
        if (out.rows[i].smoothed_loss < out.rows[stopped].smoothed_loss) stopped = i;
    }
    if (stopped <= started) return out;  // degenerate descent region

    out.has_suggestion = true;
    out.suggested_lr = out.rows[best].lr;
    const double lo = out.rows[started].lr, hi = out.rows[stopped].lr;
    for (int k = 0; k < 7; ++k) {
        out.grid[k] = lo * std::pow(hi / lo, static_cast<double>(k) / 6.0);
    }
    return out;
}

void write_range_test_csv(const RangeTestResult& result, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "step,lr,raw_loss,smoothed_loss\n";
    f.precision(17);
    for (const RangeTestRow& row : result.rows) {
        f << row.step << "," << row.lr << "," << row.raw_loss << "," << row.smoothed_loss << "\n";
    }
}

}  // namespace spkvec
