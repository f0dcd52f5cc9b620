#pragma once

#include <filesystem>
#include <vector>

#include "spkvec/model.hpp"

namespace spkvec {

struct TrialScore {
    Trial trial;
    double score;  // cosine in [-1, 1] for ce/aam, unbounded logit for bce
};

// Error curves sampled at the sorted unique scores with strict comparisons:
// far(s) = P(different > s), frr(s) = P(same < s). far is non-increasing and
// frr non-decreasing, so they cross exactly once up to ties; when no sampled
// threshold meets exactly, the crossing is linearly interpolated between the
// two adjacent thresholds (in curve-value space, so the EER is invariant
// under strictly increasing score transforms).
struct EerResult {
    double eer = 0.0;
    double threshold = 0.0;
    std::vector<double> thresholds;
    std::vector<double> far_curve;
    std::vector<double> frr_curve;
};

// <a,b> / (|a||b|); rejects zero-norm embeddings.
double cosine_score(const SpeakerEmbedding& a, const SpeakerEmbedding& b);

// Threshold sweep over the unique scores. Needs at least one same and one
// different trial.
EerResult compute_eer(const std::vector<TrialScore>& scores);

struct TrialEvaluation {
    EerResult eer;
    std::vector<TrialScore> scores;
};

// ce/aam: embed both utterances (cached per utterance id within the call)
// and take the cosine. bce: pre-transformer sequences are cached per
// utterance and each trial runs one joint pair_forward pass, in trial-list
// order. crop_samples == 0 evaluates full-length utterances; a nonzero value
// truncates from the start.
TrialEvaluation evaluate_trials(SpeakerModel& model, const TrialList& trials,
                                const CorpusView& corpus, PoolingMethod pooling, Rng* rng,
                                Index crop_samples = 0);

// Scores file: "<score> <id_a> <id_b>" per line.
void write_scores(const std::vector<TrialScore>& scores, const std::filesystem::path& path);
// Text report with eer, threshold and trial counts.
void write_eer_report(const EerResult& result, Index same_trials, Index diff_trials,
                      const std::filesystem::path& path);

}  // namespace spkvec
