#pragma once

#include <string>

#include "spkvec/encoder.hpp"

namespace spkvec {

enum class PoolingMethod { mean, max, mean_std, quantile, first, middle, last, random, first_cls };

// Config-file names: mean, max, mean+std, quantile, first, first+cls, middle,
// last, random.
PoolingMethod pooling_from_name(const std::string& name);
std::string pooling_name(PoolingMethod method);

// Output dimensionality: D for the single-frame and mean/max methods,
// 2D for mean+std, 5D for quantile.
Index pooled_dim(PoolingMethod method, Index model_dim);

struct SpeakerEmbedding {
    std::vector<double> values;
    std::string utterance_id;
};

// Prepends one all(+1) frame to every item and bumps valid lengths. Must run
// after masking (the token is never blanked) and before the transformer.
FrameSeqVar insert_cls_token(Tape& t, FrameSeqVar seq);

// Reduces (batch x time x dim) to (batch x pooled_dim) over valid frames
// only. Statistics are per dimension across time; positional methods select
// index 0 / floor((n-1)/2) / n-1 / uniform(0, n-1); first_cls requires the
// sequence to carry a cls token. Differentiable (max and quantile route
// gradients to their source frames).
Var pool(Tape& t, const FrameSeqVar& seq, PoolingMethod method, Rng* rng);

}  // namespace spkvec
