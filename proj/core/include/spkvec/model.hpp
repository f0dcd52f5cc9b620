#pragma once

#include <cstdint>
#include <string>

#include "spkvec/encoder.hpp"
#include "spkvec/heads.hpp"
#include "spkvec/pooling.hpp"

namespace spkvec {

enum class Variant { ce, aam, bce };

Variant variant_from_name(const std::string& name);
std::string variant_name(Variant v);

// Architecture-relevant configuration; hashed into the checkpoint fingerprint.
struct ModelConfig {
    EncoderConfig encoder;
    Variant variant = Variant::ce;
    PoolingMethod pooling = PoolingMethod::mean_std;
    double aam_scale = 30.0;
    double aam_margin = 0.2;
    Index num_classes = 0;  // ce/aam classifier size; ignored for bce
};

struct SpeakerModel {
    ModelConfig cfg;
    ParameterStore params;
};

// Initializes encoder plus the variant's head. Deterministic per seed.
SpeakerModel build_model(const ModelConfig& cfg, std::uint64_t seed);

// Content hash of the architecture-relevant config subset.
std::string config_fingerprint(const ModelConfig& cfg);

// normalize -> encode (eval mode) -> pool. Deterministic except for random
// pooling, which draws from the supplied generator.
SpeakerEmbedding embed_utterance(SpeakerModel& model, const Waveform& w, PoolingMethod method,
                                 Rng* rng);

}  // namespace spkvec
