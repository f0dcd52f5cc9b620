#pragma once

#include "spkvec/audio.hpp"
#include "spkvec/encoder.hpp"

namespace spkvec {

enum class HeadKind { ce, aam };

// ce: affine classifier with bias. aam: bias-free weight whose rows are
// L2-normalized against the normalized embedding (additive angular margin).
void init_classifier_head(ParameterStore& store, HeadKind kind, Index classes, Index emb_dim,
                          const Rng& rng);
// Scalar affine on the first joint-sequence output frame.
void init_pair_head(ParameterStore& store, Index model_dim, const Rng& rng);

struct HeadOutput {
    Var logits;
    Var loss;
};

HeadOutput ce_forward(ParamBinder& pb, Var embeddings, const std::vector<Index>& targets);

// Target logit s*cos(theta+m), stabilized by s*(cos(theta) - m sin m) once
// cos(theta) <= cos(pi - m); other logits s*cos(theta).
HeadOutput aam_forward(ParamBinder& pb, Var embeddings, const std::vector<Index>& targets,
                       double scale, double margin);

// Joint utterance-pair path: [start(+1), a, sep(-1), b, end(-1)] along time,
// one transformer pass, frame 0 through a scalar affine. Both inputs must be
// post-positional, fully valid sequences with matching batch and dim. The
// returned logit vector (one per item) is the trial score.
Var pair_forward(ParamBinder& pb, const EncoderConfig& cfg, const FrameSeqVar& a,
                 const FrameSeqVar& b, Mode mode, Rng* rng);

Var bce_loss(Tape& t, Var logits, const std::vector<TrialLabel>& labels);

}  // namespace spkvec
