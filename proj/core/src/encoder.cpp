#include "spkvec/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "spkvec/pooling.hpp"

namespace spkvec {
namespace {

std::string layer_prefix(Index i) { return "transformer.layer" + std::to_string(i); }

Tensor init_weight(std::vector<Index> shape, Index fan_in, Rng rng) {
    Tensor w(std::move(shape));
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data) v = rng.normal(0.0, std_dev);
    return w;
}

Tensor ones(Index n) {
    Tensor t({n});
    std::fill(t.data.begin(), t.data.end(), 1.0);
    return t;
}

}  // namespace

std::vector<std::string> validate_config(const EncoderConfig& cfg) {
    std::vector<std::string> bad;
    if (cfg.conv_kernels.empty()) bad.push_back("encoder: conv stack must have >= 1 layer");
    if (cfg.conv_kernels.size() != cfg.conv_strides.size()) {
        bad.push_back("encoder: conv_kernels and conv_strides differ in length (" +
                      std::to_string(cfg.conv_kernels.size()) + " vs " +
                      std::to_string(cfg.conv_strides.size()) + ")");
    }
    for (Index k : cfg.conv_kernels) {
        if (k < 1) bad.push_back("encoder: conv kernel sizes must be >= 1");
    }
    for (Index s : cfg.conv_strides) {
        if (s < 1) bad.push_back("encoder: conv strides must be >= 1");
    }
    if (cfg.conv_channels < 1) bad.push_back("encoder: conv_channels must be >= 1");
    if (cfg.model_dim < 1) bad.push_back("encoder: model_dim must be >= 1");
    if (cfg.heads < 1) {
        bad.push_back("encoder: heads must be >= 1");
    } else if (cfg.model_dim % cfg.heads != 0) {
        bad.push_back("encoder: model_dim " + std::to_string(cfg.model_dim) +
                      " not divisible by heads " + std::to_string(cfg.heads));
    }
    if (cfg.ffn_dim < 1) bad.push_back("encoder: ffn_dim must be >= 1");
    if (cfg.pos_conv_kernel < 1) bad.push_back("encoder: pos_conv_kernel must be >= 1");
    if (cfg.pos_conv_groups < 1 || cfg.model_dim % cfg.pos_conv_groups != 0) {
        bad.push_back("encoder: model_dim not divisible by pos_conv_groups");
    }
    auto prob = [&](double p, const char* name) {
        if (!(p >= 0.0 && p < 1.0)) {
            bad.push_back(std::string("encoder: ") + name + " must lie in [0, 1), got " +
                          std::to_string(p));
        }
    };
    prob(cfg.dropout_p, "dropout_p");
    prob(cfg.layerdrop_p, "layerdrop_p");
    prob(cfg.time_mask.probability, "time_mask.probability");
    prob(cfg.channel_mask.probability, "channel_mask.probability");
    if (cfg.time_mask.span < 1) bad.push_back("encoder: time_mask.span must be >= 1");
    if (cfg.channel_mask.span < 1) bad.push_back("encoder: channel_mask.span must be >= 1");
    return bad;
}

void require_valid(const EncoderConfig& cfg) {
    const auto bad = validate_config(cfg);
    if (!bad.empty()) {
        std::string msg = "invalid encoder config:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw std::invalid_argument(msg);
    }
}

Index receptive_field(const EncoderConfig& cfg) {
    Index rf = 1, hop = 1;
    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        rf += (cfg.conv_kernels[i] - 1) * hop;
        hop *= cfg.conv_strides[i];
    }
    return rf;
}

Index output_length(Index input_samples, const EncoderConfig& cfg) {
    const Index rf = receptive_field(cfg);
    if (input_samples < rf) {
        throw std::invalid_argument("input of " + std::to_string(input_samples) +
                                    " samples is shorter than the extractor receptive field of " +
                                    std::to_string(rf));
    }
    Index len = input_samples;
    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        len = (len - cfg.conv_kernels[i]) / cfg.conv_strides[i] + 1;
    }
    return len;
}

std::vector<std::string> encoder_param_names(const EncoderConfig& cfg) {
    std::vector<std::string> n;
    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        n.push_back("extractor.conv" + std::to_string(i) + ".weight");
        n.push_back("extractor.conv" + std::to_string(i) + ".bias");
    }
    n.push_back("extractor.norm0.gain");
    n.push_back("extractor.norm0.offset");
    n.push_back("projector.norm.gain");
    n.push_back("projector.norm.offset");
    n.push_back("projector.linear.weight");
    n.push_back("projector.linear.bias");
    n.push_back("positional.conv.weight");
    n.push_back("positional.conv.bias");
    n.push_back("positional.norm.gain");
    n.push_back("positional.norm.offset");
    for (Index i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        for (const char* proj : {"q", "k", "v", "out"}) {
            n.push_back(p + ".attn." + proj + ".weight");
            n.push_back(p + ".attn." + proj + ".bias");
        }
        n.push_back(p + ".attn_norm.gain");
        n.push_back(p + ".attn_norm.offset");
        n.push_back(p + ".ffn.fc1.weight");
        n.push_back(p + ".ffn.fc1.bias");
        n.push_back(p + ".ffn.fc2.weight");
        n.push_back(p + ".ffn.fc2.bias");
        n.push_back(p + ".ffn_norm.gain");
        n.push_back(p + ".ffn_norm.offset");
    }
    return n;
}

void init_encoder_params(ParameterStore& store, const EncoderConfig& cfg, const Rng& rng) {
    require_valid(cfg);
    const Index c = cfg.conv_channels, d = cfg.model_dim, f = cfg.ffn_dim;
    auto weight = [&](const std::string& name, std::vector<Index> shape, Index fan_in) {
        store.create(name, init_weight(std::move(shape), fan_in, rng.fork(name)));
    };
    auto zeros = [&](const std::string& name, Index n) { store.create(name, Tensor({n})); };
    auto gain = [&](const std::string& name, Index n) { store.create(name, ones(n)); };

    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        const Index c_in = i == 0 ? 1 : c;
        const Index k = cfg.conv_kernels[i];
        weight("extractor.conv" + std::to_string(i) + ".weight", {c, c_in, k}, c_in * k);
        zeros("extractor.conv" + std::to_string(i) + ".bias", c);
    }
    gain("extractor.norm0.gain", c);
    zeros("extractor.norm0.offset", c);
    gain("projector.norm.gain", c);
    zeros("projector.norm.offset", c);
    weight("projector.linear.weight", {d, c}, c);
    zeros("projector.linear.bias", d);
    weight("positional.conv.weight", {d, d / cfg.pos_conv_groups, cfg.pos_conv_kernel},
           (d / cfg.pos_conv_groups) * cfg.pos_conv_kernel);
    zeros("positional.conv.bias", d);
    gain("positional.norm.gain", d);
    zeros("positional.norm.offset", d);
    for (Index i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        for (const char* proj : {"q", "k", "v", "out"}) {
            weight(p + ".attn." + std::string(proj) + ".weight", {d, d}, d);
            zeros(p + ".attn." + std::string(proj) + ".bias", d);
        }
        gain(p + ".attn_norm.gain", d);
        zeros(p + ".attn_norm.offset", d);
        weight(p + ".ffn.fc1.weight", {f, d}, d);
        zeros(p + ".ffn.fc1.bias", f);
        weight(p + ".ffn.fc2.weight", {d, f}, f);
        zeros(p + ".ffn.fc2.bias", d);
        gain(p + ".ffn_norm.gain", d);
        zeros(p + ".ffn_norm.offset", d);
    }
    if (cfg.freeze_feature_extractor) store.freeze_prefix("extractor.");
}

FrameSequence to_value(const Tape& tape, const FrameSeqVar& seq) {
    FrameSequence out;
    out.data = tape.val(seq.data);
    out.valid_lengths = seq.valid_lengths;
    out.has_cls = seq.has_cls;
    out.masks = seq.masks;
    return out;
}

Var extract_features(ParamBinder& pb, const EncoderConfig& cfg, const WaveBatch& batch) {
    Tape& t = pb.tape();
    const Index b = batch.batch(), s = batch.samples();
    Var x = t.leaf(batch.data.reshaped({b, 1, s}), false);
    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        const std::string p = "extractor.conv" + std::to_string(i);
        x = ops::conv1d(t, x, pb(p + ".weight"), pb(p + ".bias"), cfg.conv_strides[i], 0, 1);
        if (i == 0) {
            // per-channel statistics: groups == channels
            x = ops::group_norm(t, x, cfg.conv_channels, pb("extractor.norm0.gain"),
                                pb("extractor.norm0.offset"), cfg.norm_eps);
        }
        x = ops::gelu(t, x);
    }
    return x;
}

FrameSeqVar project(ParamBinder& pb, const EncoderConfig& cfg, Var latent,
                    std::vector<Index> valid_frames, Mode mode, Rng* rng) {
    Tape& t = pb.tape();
    Var x = ops::transpose_12(t, latent);  // -> batch x frames x channels
    x = ops::layer_norm(t, x, pb("projector.norm.gain"), pb("projector.norm.offset"),
                        cfg.norm_eps);
    x = ops::linear(t, x, pb("projector.linear.weight"), pb("projector.linear.bias"));
    x = ops::dropout(t, x, cfg.dropout_p, mode == Mode::train, rng);
    FrameSeqVar seq;
    seq.data = x;
    seq.valid_lengths = std::move(valid_frames);
    return seq;
}

FrameSeqVar apply_masks(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq, Mode mode,
                        Rng* rng) {
    if (mode == Mode::eval) return seq;
    if (cfg.time_mask.probability == 0.0 && cfg.channel_mask.probability == 0.0) return seq;
    if (rng == nullptr) throw std::invalid_argument("apply_masks: train mode requires a generator");
    Tape& t = pb.tape();
    const Tensor& xv = t.val(seq.data);
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);

    Tensor mask(xv.shape);
    std::fill(mask.data.begin(), mask.data.end(), 1.0);
    seq.masks.time_span = cfg.time_mask.span;
    seq.masks.channel_span = cfg.channel_mask.span;
    seq.masks.per_item.resize(batch);
    for (Index b = 0; b < batch; ++b) {
        MaskSpans& spans = seq.masks.per_item[b];
        std::vector<bool> t_masked(time, false), c_masked(dim, false);
        for (Index tt = 0; tt < time; ++tt) {
            if (rng->bernoulli(cfg.time_mask.probability)) {
                spans.time_starts.push_back(tt);
                for (Index u = tt; u < std::min(time, tt + cfg.time_mask.span); ++u) {
                    t_masked[u] = true;
                }
            }
        }
        for (Index c = 0; c < dim; ++c) {
            if (rng->bernoulli(cfg.channel_mask.probability)) {
                spans.channel_starts.push_back(c);
                for (Index u = c; u < std::min(dim, c + cfg.channel_mask.span); ++u) {
                    c_masked[u] = true;
                }
            }
        }
        double* mrow = mask.ptr() + b * time * dim;
        for (Index tt = 0; tt < time; ++tt) {
            for (Index c = 0; c < dim; ++c) {
                if (t_masked[tt] || c_masked[c]) mrow[tt * dim + c] = 0.0;
            }
        }
    }
    seq.data = ops::mul_mask(t, seq.data, std::move(mask));
    return seq;
}

FrameSeqVar add_positional(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq, Mode mode,
                           Rng* rng) {
    Tape& t = pb.tape();
    const Index time = t.val(seq.data).dim(1);
    const Index pad = cfg.pos_conv_kernel / 2;
    Var pos = ops::transpose_12(t, seq.data);  // batch x dim x time
    pos = ops::conv1d(t, pos, pb("positional.conv.weight"), pb("positional.conv.bias"), 1, pad,
                      cfg.pos_conv_groups);
    pos = ops::gelu(t, pos);
    pos = ops::transpose_12(t, pos);
    const Index conv_time = t.val(pos).dim(1);
    if (conv_time > time) pos = ops::slice_time(t, pos, 0, time);  // trim trailing frame
    Var x = ops::add(t, seq.data, pos);
    x = ops::layer_norm(t, x, pb("positional.norm.gain"), pb("positional.norm.offset"),
                        cfg.norm_eps);
    x = ops::dropout(t, x, cfg.dropout_p, mode == Mode::train, rng);
    seq.data = x;
    return seq;
}

FrameSeqVar transformer_stack(ParamBinder& pb, const EncoderConfig& cfg, FrameSeqVar seq,
                              Mode mode, Rng* rng) {
    Tape& t = pb.tape();
    const bool training = mode == Mode::train;
    if (training && cfg.layerdrop_p > 0.0 && rng == nullptr) {
        throw std::invalid_argument("transformer_stack: LayerDrop requires a generator");
    }
    for (Index i = 0; i < cfg.layers; ++i) {
        if (training && cfg.layerdrop_p > 0.0 && rng->bernoulli(cfg.layerdrop_p)) {
            continue;  // layer skipped, identity
        }
        const std::string p = layer_prefix(i);
        Var attn = ops::multi_head_self_attention(
            t, seq.data, cfg.heads, pb(p + ".attn.q.weight"), pb(p + ".attn.q.bias"),
            pb(p + ".attn.k.weight"), pb(p + ".attn.k.bias"), pb(p + ".attn.v.weight"),
            pb(p + ".attn.v.bias"), pb(p + ".attn.out.weight"), pb(p + ".attn.out.bias"),
            seq.valid_lengths);
        attn = ops::dropout(t, attn, cfg.dropout_p, training, rng);
        Var x = ops::add(t, seq.data, attn);
        x = ops::layer_norm(t, x, pb(p + ".attn_norm.gain"), pb(p + ".attn_norm.offset"),
                            cfg.norm_eps);

        Var h = ops::linear(t, x, pb(p + ".ffn.fc1.weight"), pb(p + ".ffn.fc1.bias"));
        h = ops::gelu(t, h);
        h = ops::linear(t, h, pb(p + ".ffn.fc2.weight"), pb(p + ".ffn.fc2.bias"));
        h = ops::dropout(t, h, cfg.dropout_p, training, rng);
        Var y = ops::add(t, x, h);
        seq.data = ops::layer_norm(t, y, pb(p + ".ffn_norm.gain"), pb(p + ".ffn_norm.offset"),
                                   cfg.norm_eps);
    }
    return seq;
}

FrameSeqVar encode(ParamBinder& pb, const EncoderConfig& cfg, const WaveBatch& batch, Mode mode,
                   Rng* rng) {
    require_valid(cfg);
    if (batch.batch() == 0) throw std::invalid_argument("encode: empty batch");
    std::vector<Index> valid_frames;
    valid_frames.reserve(batch.valid_lengths.size());
    for (Index v : batch.valid_lengths) valid_frames.push_back(output_length(v, cfg));

    Var latent = extract_features(pb, cfg, batch);
    FrameSeqVar seq = project(pb, cfg, latent, std::move(valid_frames), mode, rng);
    seq = apply_masks(pb, cfg, seq, mode, rng);
    seq = add_positional(pb, cfg, seq, mode, rng);
    if (cfg.cls_token) seq = insert_cls_token(pb.tape(), seq);
    return transformer_stack(pb, cfg, seq, mode, rng);
}

void export_encoder_weights(const ParameterStore& store, const EncoderConfig& cfg,
                            const std::filesystem::path& dir) {
    std::map<std::string, Tensor> arrays;
    for (const std::string& name : encoder_param_names(cfg)) {
        arrays.emplace(name, store.get(name));
    }
    save_manifest(arrays, dir);
}

std::vector<std::string> import_weights(ParameterStore& store, const EncoderConfig& cfg,
                                        const std::filesystem::path& dir) {
    const std::map<std::string, Tensor> arrays = load_manifest(dir);
    std::vector<std::string> problems;
    const std::vector<std::string> required = encoder_param_names(cfg);
    for (const std::string& name : required) {
        auto it = arrays.find(name);
        if (it == arrays.end()) {
            problems.push_back("missing required parameter: " + name);
            continue;
        }
        const Tensor& have = store.get(name);
        if (it->second.shape != have.shape) {
            problems.push_back("shape mismatch for " + name + ": manifest " +
                               shape_str(it->second.shape) + " vs expected " +
                               shape_str(have.shape));
        }
    }
    if (!problems.empty()) {
        std::string msg = "weight import rejected:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw std::runtime_error(msg);
    }
    std::set<std::string> known(required.begin(), required.end());
    std::vector<std::string> unmatched;
    for (const auto& [name, tensor] : arrays) {
        if (known.count(name)) {
            store.get(name) = tensor;
        } else {
            unmatched.push_back(name);
        }
    }
    return unmatched;
}

}  // namespace spkvec
