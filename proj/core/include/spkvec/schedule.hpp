#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "spkvec/model.hpp"
#include "spkvec/params.hpp"

namespace spkvec {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

enum class ScheduleKind { constant, exponential_decay, one_cycle, tri_stage };

ScheduleKind schedule_from_name(const std::string& name);
std::string schedule_name(ScheduleKind kind);

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::one_cycle;
    Index total_steps = 100000;
    // constant
    double lr = 3e-6;
    // exponential_decay
    double lr_start = 1e-5;
    double lr_end = 3e-6;
    // one_cycle: linear ramp from max_lr/start_div to max_lr over
    // warmup_fraction of the run, then cosine decay to max_lr/final_div
    double max_lr = 5e-5;
    double warmup_fraction = 0.1;
    double start_div = 25.0;
    double final_div = 1e4;
    // tri_stage: linear warmup, hold, exponential decay
    double lr_floor_init = 1e-7;
    double lr_peak = 1e-5;
    double lr_floor_final = 1e-7;
    Index warmup_steps = 10000;
    Index hold_steps = 40000;
};

std::vector<std::string> validate_schedule(const ScheduleSpec& spec);

// Learning rate for 0 <= step < total_steps; rejects anything else.
double lr_at(const ScheduleSpec& spec, Index step);

// Tuned maximum learning rates reported for the three variants.
double reference_max_lr(Variant v);

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    Index step = 0;
};

// Bias-corrected Adam over named gradients. Frozen parameters are untouched
// (no moment update either). Any non-finite gradient rejects the whole step
// before any state changes.
void adam_step(ParameterStore& store, const std::map<std::string, Tensor>& grads,
               const AdamConfig& cfg, double lr, AdamState& state);

// --- LR range test -----------------------------------------------------------

struct RangeTestRow {
    Index step;
    double lr;
    double raw_loss;
    double smoothed_loss;
};

struct RangeTestResult {
    std::vector<RangeTestRow> rows;
    bool has_suggestion = false;
    double suggested_lr = 0.0;  // steepest negative slope of the smoothed loss
    std::array<double, 7> grid{};
    bool diverged = false;  // sweep ended early on a non-finite loss
};

// Sweeps the learning rate log-linearly from min_lr to max_lr over `steps`
// calls of step_fn(lr), which performs one optimization step and returns the
// batch loss it saw. The 7-point grid is log-spaced between the LRs where the
// smoothed loss started and stopped decreasing.
RangeTestResult lr_range_test(const std::function<double(double)>& step_fn, Index steps,
                              double min_lr, double max_lr);

// CSV: step,lr,raw_loss,smoothed_loss
void write_range_test_csv(const RangeTestResult& result, const std::filesystem::path& path);

}  // namespace spkvec
