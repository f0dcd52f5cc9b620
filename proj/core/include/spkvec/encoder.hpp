#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "spkvec/audio.hpp"
#include "spkvec/binder.hpp"
#include "spkvec/ops.hpp"
#include "spkvec/params.hpp"

namespace spkvec {

enum class Mode { train, eval };

struct MaskSpanConfig {
    double probability = 0.0;
    Index span = 10;
};

struct EncoderConfig {
    Index conv_channels = 512;
    std::vector<Index> conv_kernels = {10, 3, 3, 3, 3, 2, 2};
    std::vector<Index> conv_strides = {5, 2, 2, 2, 2, 2, 2};
    Index model_dim = 768;
    Index ffn_dim = 3072;
    Index layers = 12;
    Index heads = 12;
    Index pos_conv_kernel = 128;
    Index pos_conv_groups = 16;
    double dropout_p = 0.1;
    double layerdrop_p = 0.05;
    MaskSpanConfig time_mask{0.05, 10};
    MaskSpanConfig channel_mask{0.004, 10};
    bool freeze_feature_extractor = true;
    bool cls_token = false;
    double norm_eps = 1e-5;
};

// All config-domain problems at once; empty means valid.
std::vector<std::string> validate_config(const EncoderConfig& cfg);
void require_valid(const EncoderConfig& cfg);

// Samples needed to produce one latent frame (400 for the default stack).
Index receptive_field(const EncoderConfig& cfg);

// Frame count after the conv stack: L' = floor((L - k)/s) + 1 per layer,
// no padding. Rejects inputs shorter than the receptive field.
Index output_length(Index input_samples, const EncoderConfig& cfg);

struct MaskSpans {
    std::vector<Index> time_starts;
    std::vector<Index> channel_starts;
};

struct MaskMetadata {
    std::vector<MaskSpans> per_item;
    Index time_span = 0;
    Index channel_span = 0;
    bool empty() const { return per_item.empty(); }
};

// Batch of embedding sequences with per-item frame bookkeeping. Positions at
// or past valid_lengths[i] are excluded from attention and pooling.
struct FrameSequence {
    Tensor data;  // batch x time x dim
    std::vector<Index> valid_lengths;
    bool has_cls = false;
    MaskMetadata masks;
};

// Tape-resident form used while building a forward pass.
struct FrameSeqVar {
    Var data;
    std::vector<Index> valid_lengths;
    bool has_cls = false;
    MaskMetadata masks;
};

FrameSequence to_value(const Tape& tape, const FrameSeqVar& seq);

// Parameter creation / naming. Initialization is deterministic per seed and
// independent of creation order (each tensor draws from a name-keyed stream).
void init_encoder_params(ParameterStore& store, const EncoderConfig& cfg, const Rng& rng);
std::vector<std::string> encoder_param_names(const EncoderConfig& cfg);

// --- Forward stages (all append to the binder's tape) -----------------------

// conv stack: layer 1 conv -> group_norm(groups == channels) -> GELU,
// layers 2..n conv -> GELU. Returns latent (batch x channels x frames).
Var extract_features(ParamBinder& pb, const EncoderConfig& cfg, const WaveBatch& batch);

// per-frame layer_norm -> shared linear into model_dim -> dropout.
FrameSeqVar project(ParamBinder& pb, const EncoderConfig& cfg, Var latent,
                    std::vector<Index> valid_frames, Mode mode, Rng* rng);

// SpecAugment-style masking; identity in eval mode. Span starts are sampled
// per frame/channel with the configured probability; spans may overlap.
FrameSeqVar apply_masks(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq, Mode mode,
                        Rng* rng);

// grouped conv -> GELU -> trim trailing frame(s) -> residual sum ->
// layer_norm -> dropout.
FrameSeqVar add_positional(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq, Mode mode,
                           Rng* rng);

// Post-norm transformer layers with LayerDrop in train mode.
FrameSeqVar transformer_stack(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq,
                              Mode mode, Rng* rng);

// Full composition: extract -> project -> masks -> positional ->
// [cls token when configured] -> transformer.
FrameSeqVar encode(ParamBinder& pb, const EncoderConfig& cfg, const WaveBatch& batch, Mode mode,
                   Rng* rng);

// --- Weight manifest ---------------------------------------------------------

void export_encoder_weights(const ParameterStore& store, const EncoderConfig& cfg,
                            const std::filesystem::path& dir);

// Loads every encoder parameter from a manifest directory. Missing names or
// shape mismatches reject with one message listing every discrepancy.
// Returns manifest entries that matched no parameter (loaded nothing).
std::vector<std::string> import_weights(ParameterStore& store, const EncoderConfig& cfg,
                                        const std::filesystem::path& dir);

}  // namespace spkvec
