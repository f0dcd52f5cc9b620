#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "spkvec/eval.hpp"
#include "spkvec/schedule.hpp"

namespace spkvec {

struct PairBatchConfig {
    Index speakers = 8;
    Index utts_per_speaker = 4;
    Index same_pairs = 16;
    Index diff_pairs = 16;
};

struct TrainConfig {
    ModelConfig model;
    ScheduleSpec schedule;  // total_steps is resolved to `iterations` at run time
    AdamConfig adam;
    Index iterations = 100000;
    Index files_per_batch = 66;
    double crop_seconds = 3.0;
    PairBatchConfig pair;
    Index validation_interval = 0;  // 0 resolves to max(1, iterations / 10)
    // Sub-batch size for gradient accumulation; bounds tape memory without
    // changing the weighted-mean loss. Note the realized dropout/mask draws
    // depend on the chunking, so it is part of the reproducibility config.
    Index accum_files = 8;
    Index eval_crop_samples = 0;  // 0 = full-length evaluation utterances
    std::string init_weights;     // optional encoder manifest to import
    std::uint64_t seed = 1;

    Index crop_samples() const {
        return static_cast<Index>(std::llround(crop_seconds * kSampleRate));
    }
    Index sample_budget() const { return files_per_batch * crop_samples(); }
};

// --- Batch construction ------------------------------------------------------

struct ClassificationBatch {
    std::vector<Waveform> crops;        // cropped then normalized
    std::vector<Index> valid_lengths;   // pre-padding sample counts
    std::vector<Index> targets;         // speaker class indices
    std::vector<std::string> utterance_ids;
};

// files_per_batch distinct utterances, sampled uniformly without replacement.
ClassificationBatch make_classification_batch(const CorpusView& corpus, const TrainConfig& cfg,
                                              Rng& rng);

struct PairBatch {
    std::vector<Waveform> crops;
    std::vector<Index> valid_lengths;
    std::vector<std::string> crop_utterances;
    std::vector<std::string> crop_speakers;
    struct Pair {
        Index a, b;
        TrialLabel label;
    };
    std::vector<Pair> pairs;  // same_pairs + diff_pairs, no pair repeated
};

// speakers x utts_per_speaker crops; same pairs drawn from within-speaker
// combinations, different pairs from cross-speaker ones, without replacement.
PairBatch make_pair_batch(const CorpusView& corpus, const TrainConfig& cfg, Rng& rng);

// --- Training loop -----------------------------------------------------------

struct MetricsRow {
    Index step;
    double loss;
    double lr;
    double validation_eer = -1.0;  // negative when not computed at this step
};

struct CheckpointData {
    std::map<std::string, Tensor> parameters;
    AdamState opt;
    Index step = 0;
    double validation_eer = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    std::vector<MetricsRow> log;
    CheckpointData best;   // minimum validation EER; ties keep the earlier step
    CheckpointData final_state;
    bool diverged = false;
    std::string divergence_note;
};

// One batch -> forward -> loss -> backward -> adam step at an explicit
// learning rate. Throws on a non-finite loss or gradient (divergence guard);
// the LR range test and the training loop share this.
double train_single_step(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus,
                         Rng& rng, AdamState& opt, double lr);

// Iterates batch -> forward -> loss -> backward -> adam with lr_at(step).
// Validation EER is computed every validation_interval steps and always after
// the final step; the best checkpoint tracks the minimum. A non-finite loss
// or gradient aborts with the partial log recorded.
TrainResult train_run(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus,
                      const TrialList& validation);

// CSV: step,loss,lr,validation_eer (last column empty when not computed).
void write_metrics_csv(const std::vector<MetricsRow>& log, const std::filesystem::path& path);

// --- Checkpoints --------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& data,
                     const std::string& fingerprint, const std::string& config_text);

struct LoadedCheckpoint {
    CheckpointData data;
    std::string fingerprint;
    std::string config_text;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Installs checkpoint parameters into a freshly built model; every name and
// shape must match.
void restore_parameters(SpeakerModel& model, const CheckpointData& data);

// --- Ablations -----------------------------------------------------------------

std::vector<std::string> ablation_names();

// Returns base with exactly the documented fields changed; unknown names are
// rejected with the list of valid ones.
TrainConfig apply_ablation(const TrainConfig& base, const std::string& name);

}  // namespace spkvec
