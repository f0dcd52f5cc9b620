#pragma once

#include <vector>

#include "spkvec/rng.hpp"
#include "spkvec/tape.hpp"

// Differentiable primitives. Every op validates shapes up front, computes the
// forward value, and registers a reverse-mode closure on the tape. Reductions
// inside forward and backward run in a fixed order (parallel chunks write
// disjoint slices), so repeated runs are bit-identical.
namespace spkvec::ops {

Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double c);
// Elementwise multiply by a constant tensor (dropout / SpecAugment masks).
Var mul_mask(Tape& t, Var x, Tensor mask);
Var gelu(Tape& t, Var x);

// x: ... x In, weight: Out x In, bias: Out (or invalid Var for none).
Var linear(Tape& t, Var x, Var weight, Var bias);

// x: B x Cin x L, weight: Cout x (Cin/groups) x K, bias: Cout or invalid.
// Cross-correlation convention; length_out = floor((L + 2p - K)/stride) + 1.
Var conv1d(Tape& t, Var x, Var weight, Var bias, Index stride, Index padding, Index groups);

// Normalizes over the last dimension; gain/offset have that dimension.
Var layer_norm(Tape& t, Var x, Var gain, Var offset, double eps);

// x: B x C x L; statistics per (item, group) over (C/groups) x L elements.
Var group_norm(Tape& t, Var x, Index groups, Var gain, Var offset, double eps);

// Inverted dropout: train mode masks and scales by 1/(1-p); eval is identity.
Var dropout(Tape& t, Var x, double p, bool training, Rng* rng);

// Softmax over the last dimension. x is viewed as rows of its last dim;
// row_valid (one entry per row, or empty for all-valid) gives the number of
// leading columns that participate; the rest get probability zero.
Var softmax_rows(Tape& t, Var x, const std::vector<Index>& row_valid);

// Batched matmul on (N, M, K) x (N, K, P); trans_a / trans_b transpose the
// trailing two dims of the respective operand.
Var bmm(Tape& t, Var a, Var b, bool trans_a, bool trans_b);

// (B, T, D) -> (B*H, T, D/H) and back.
Var split_heads(Tape& t, Var x, Index heads);
Var merge_heads(Tape& t, Var x, Index heads);

// (B, X, Y) -> (B, Y, X).
Var transpose_12(Tape& t, Var x);

// Concatenate (B, T_i, D) parts along time.
Var concat_time(Tape& t, const std::vector<Var>& parts);
Var slice_time(Tape& t, Var x, Index start, Index length);
// (B, T, D) -> (B, D), picking one frame.
Var select_frame(Tape& t, Var x, Index frame);

// Scalar sum(x * weights); the standard scalarizer for gradient checks.
Var weighted_sum(Tape& t, Var x, Tensor weights);

// Residual 12-headed-style self-attention core: per-head scaled dot-product
// with key masking by valid length, then output projection. Residual add and
// norms live with the encoder.
Var multi_head_self_attention(Tape& t, Var x, Index heads, Var wq, Var bq, Var wk, Var bk,
                              Var wv, Var bv, Var wo, Var bo,
                              const std::vector<Index>& valid_lengths);

// Mean cross-entropy over rows of logits (B x C), stabilized by
// max-subtraction.
Var cross_entropy(Tape& t, Var logits, const std::vector<Index>& targets);

// Rows scaled to unit L2 norm; rejects zero-norm rows.
Var l2_normalize_rows(Tape& t, Var x);

// Additive-angular-margin transform on cosine logits (B x C): target column
// becomes s*cos(theta+m), with the standard fallback s*(cos(theta) - m*sin m)
// once theta + m would pass pi; other columns are scaled by s.
Var aam_margin(Tape& t, Var cosines, const std::vector<Index>& targets, double s, double m);

// Mean binary cross-entropy with logits over a length-N vector; labels are
// 1 (same) / 0 (different). Log-sum-exp form, overflow-safe.
Var bce_with_logits(Tape& t, Var logits, const std::vector<double>& labels);

}  // namespace spkvec::ops
