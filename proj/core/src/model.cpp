#include "spkvec/model.hpp"

#include <sstream>
#include <stdexcept>

namespace spkvec {
namespace {

void fnv_mix(std::uint64_t& h, const std::string& s) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    h ^= '\x1f';
    h *= 0x100000001b3ull;
}

}  // namespace

Variant variant_from_name(const std::string& name) {
    if (name == "ce") return Variant::ce;
    if (name == "aam") return Variant::aam;
    if (name == "bce") return Variant::bce;
    throw std::invalid_argument("unknown variant '" + name + "' (expected ce, aam or bce)");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::ce: return "ce";
        case Variant::aam: return "aam";
        case Variant::bce: return "bce";
    }
    throw std::logic_error("unreachable variant");
}

SpeakerModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
    require_valid(cfg.encoder);
    if (cfg.pooling == PoolingMethod::first_cls && !cfg.encoder.cls_token) {
        throw std::invalid_argument("first+cls pooling requires encoder.cls_token = true");
    }
    SpeakerModel model;
    model.cfg = cfg;
    const Rng rng(seed);
    init_encoder_params(model.params, cfg.encoder, rng);
    if (cfg.variant == Variant::bce) {
        init_pair_head(model.params, cfg.encoder.model_dim, rng);
    } else {
        if (cfg.num_classes < 2) {
            throw std::invalid_argument("ce/aam model needs num_classes >= 2, got " +
                                        std::to_string(cfg.num_classes));
        }
        const Index emb_dim = pooled_dim(cfg.pooling, cfg.encoder.model_dim);
        init_classifier_head(model.params,
                             cfg.variant == Variant::ce ? HeadKind::ce : HeadKind::aam,
                             cfg.num_classes, emb_dim, rng);
    }
    return model;
}

std::string config_fingerprint(const ModelConfig& cfg) {
    std::ostringstream s;
    const EncoderConfig& e = cfg.encoder;
    s << "variant=" << variant_name(cfg.variant) << ";pooling=" << pooling_name(cfg.pooling)
      << ";classes=" << cfg.num_classes << ";s=" << cfg.aam_scale << ";m=" << cfg.aam_margin
      << ";conv_channels=" << e.conv_channels << ";kernels=";
    for (Index k : e.conv_kernels) s << k << ",";
    s << ";strides=";
    for (Index k : e.conv_strides) s << k << ",";
    s << ";model_dim=" << e.model_dim << ";ffn_dim=" << e.ffn_dim << ";layers=" << e.layers
      << ";heads=" << e.heads << ";pos_kernel=" << e.pos_conv_kernel
      << ";pos_groups=" << e.pos_conv_groups << ";cls=" << (e.cls_token ? 1 : 0);

    std::uint64_t h = 0xcbf29ce484222325ull;
    fnv_mix(h, s.str());
    std::ostringstream hex;
    hex << std::hex << h;
    return hex.str();
}

SpeakerEmbedding embed_utterance(SpeakerModel& model, const Waveform& w, PoolingMethod method,
                                 Rng* rng) {
    const Waveform normalized = normalize(w);
    const WaveBatch batch = make_wave_batch({normalized});
    Tape t;
    ParamBinder pb(t, model.params, false);
    FrameSeqVar seq = encode(pb, model.cfg.encoder, batch, Mode::eval, nullptr);
    Var pooled = pool(t, seq, method, rng);
    SpeakerEmbedding e;
    e.values = t.val(pooled).data;
    e.utterance_id = w.utterance_id;
    return e;
}

}  // namespace spkvec
