#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "spkvec/encoder.hpp"
#include "spkvec/grad_check.hpp"
#include "spkvec/model.hpp"
#include "test_util.hpp"

using namespace spkvec;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig c;
    c.conv_channels = 4;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.layers = 2;
    c.heads = 2;
    c.pos_conv_kernel = 8;
    c.pos_conv_groups = 4;
    c.dropout_p = 0.0;
    c.layerdrop_p = 0.0;
    c.time_mask = {0.0, 10};
    c.channel_mask = {0.0, 10};
    c.freeze_feature_extractor = false;
    return c;
}

WaveBatch noise_batch(Index items, Index samples, std::uint64_t seed) {
    std::vector<Waveform> ws;
    Rng rng(seed);
    for (Index i = 0; i < items; ++i) {
        Waveform w;
        for (Index j = 0; j < samples; ++j) w.samples.push_back(rng.normal());
        ws.push_back(normalize(w));
    }
    return make_wave_batch(ws);
}

// The length recurrence, folded explicitly: the test-side oracle.
Index fold_lengths(Index len, const std::vector<Index>& ks, const std::vector<Index>& ss) {
    for (Index i = 0; i < ks.size(); ++i) len = (len - ks[i]) / ss[i] + 1;
    return len;
}

}  // namespace

TEST_CASE("output_length matches the recurrence oracle") {
    const EncoderConfig def;  // default stack (10,3,3,3,3,2,2)/(5,2,2,2,2,2,2)
    CHECK(output_length(48000, def) == 149);
    CHECK(output_length(400, def) == 1);
    CHECK(output_length(48320, def) == 150);  // hop of 320 samples = 20 ms
    CHECK(receptive_field(def) == 400);
    CHECK_THROWS_WITH_AS(output_length(399, def), doctest::Contains("receptive field"),
                         std::invalid_argument);

    Rng rng(101);
    for (int i = 0; i < 50; ++i) {
        const Index len = 400 + rng.below(60000);
        CHECK(output_length(len, def) == fold_lengths(len, def.conv_kernels, def.conv_strides));
    }
}

TEST_CASE("config validation catches every domain violation at once") {
    EncoderConfig c = tiny_cfg();
    c.layerdrop_p = 1.0;   // probabilities must stay below 1
    c.heads = 3;           // 16 % 3 != 0
    c.time_mask.span = 0;
    const auto bad = validate_config(c);
    CHECK(bad.size() == 3);
    CHECK_THROWS_AS(require_valid(c), std::invalid_argument);
    CHECK(validate_config(tiny_cfg()).empty());
}

TEST_CASE("zero input produces the bias pattern, identical across items and frames") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 7);
    // give the conv biases some signal so the pattern is nonzero
    Rng rng(9);
    for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
        Tensor& b = m.params.get("extractor.conv" + std::to_string(i) + ".bias");
        for (double& v : b.data) v = rng.normal();
    }
    WaveBatch batch;
    batch.data = Tensor({2, 2000});
    batch.valid_lengths = {2000, 2000};
    batch.speaker_ids = {"a", "b"};

    Tape t;
    ParamBinder pb(t, m.params, false);
    const Tensor latent = t.val(extract_features(pb, cfg, batch));
    const Index C = latent.dim(1), F = latent.dim(2);
    REQUIRE(F == output_length(2000, cfg));
    for (Index b = 0; b < 2; ++b) {
        for (Index c = 0; c < C; ++c) {
            const double ref = latent.data[c * F];
            for (Index f = 0; f < F; ++f) {
                CHECK(latent.data[(b * C + c) * F + f] == ref);
            }
        }
    }
}

TEST_CASE("latent frames depend only on their 400-sample window") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 3);
    WaveBatch a = noise_batch(1, 2000, 5);
    WaveBatch b;
    b.data = a.data;
    b.valid_lengths = a.valid_lengths;
    b.speaker_ids = a.speaker_ids;
    // frame 2 covers samples [640, 1040); poke sample 1500
    b.data.data[1500] += 3.0;

    // The conv geometry is strictly local. The first layer's per-channel norm
    // couples frames through its time statistics, so bit-exact locality is
    // checked on the norm-free conv path and the full extractor is held to a
    // bounded statistics drift instead.
    auto conv_only = [&](const WaveBatch& batch) {
        Tape t;
        ParamBinder pb(t, m.params, false);
        Var x = t.leaf(batch.data.reshaped({1, 1, 2000}));
        for (Index i = 0; i < cfg.conv_kernels.size(); ++i) {
            const std::string p = "extractor.conv" + std::to_string(i);
            x = ops::conv1d(t, x, pb(p + ".weight"), pb(p + ".bias"), cfg.conv_strides[i], 0, 1);
            x = ops::gelu(t, x);
        }
        return t.val(x);
    };
    {
        const Tensor la = conv_only(a), lb = conv_only(b);
        const Index C = la.dim(1), F = la.dim(2);
        bool any_diff = false;
        for (Index c = 0; c < C; ++c) {
            CHECK(la.data[c * F + 2] == lb.data[c * F + 2]);
            for (Index f = 0; f < F; ++f) any_diff |= la.data[c * F + f] != lb.data[c * F + f];
        }
        CHECK(any_diff);  // the perturbation does land somewhere
    }
    {
        auto full = [&](const WaveBatch& batch) {
            Tape t;
            ParamBinder pb(t, m.params, false);
            return t.val(extract_features(pb, cfg, batch));
        };
        const Tensor la = full(a), lb = full(b);
        const Index C = la.dim(1), F = la.dim(2);
        double off_window = 0.0, at_impact = 0.0;
        for (Index c = 0; c < C; ++c) {
            off_window = std::max(off_window, std::abs(la.data[c * F + 2] - lb.data[c * F + 2]));
            // sample 1500 sits in frame 4's window [1280, 1680)
            at_impact = std::max(at_impact, std::abs(la.data[c * F + 4] - lb.data[c * F + 4]));
        }
        CHECK(off_window * 3.0 < at_impact);
    }
}

TEST_CASE("project composes layer_norm then linear, dropout transparent in eval") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 11);
    Rng rng(13);
    const Tensor latent = random_tensor({2, cfg.conv_channels, 5}, rng);

    Tape t;
    ParamBinder pb(t, m.params, false);
    FrameSeqVar seq = project(pb, cfg, t.leaf(latent), {5, 5}, Mode::eval, nullptr);
    CHECK(t.val(seq.data).shape == std::vector<Index>{2, 5, cfg.model_dim});

    Var ref = ops::transpose_12(t, t.leaf(latent));
    ref = ops::layer_norm(t, ref, pb("projector.norm.gain"), pb("projector.norm.offset"),
                          cfg.norm_eps);
    ref = ops::linear(t, ref, pb("projector.linear.weight"), pb("projector.linear.bias"));
    CHECK(max_abs_diff(t.val(seq.data), t.val(ref)) == 0.0);
}

TEST_CASE("project gradient check at dim 8") {
    EncoderConfig cfg = tiny_cfg();
    cfg.conv_channels = 6;
    cfg.model_dim = 8;
    cfg.pos_conv_groups = 2;
    Rng rng(17);
    const double err = gradient_check(
        [&cfg](Tape& t, const std::vector<Var>& v) {
            ParameterStore empty;
            ParamBinder pb(t, empty, true);
            pb.bind("projector.norm.gain", v[1]);
            pb.bind("projector.norm.offset", v[2]);
            pb.bind("projector.linear.weight", v[3]);
            pb.bind("projector.linear.bias", v[4]);
            FrameSeqVar seq = project(pb, cfg, v[0], {3}, Mode::eval, nullptr);
            Tensor w(t.val(seq.data).shape);
            for (Index i = 0; i < w.numel(); ++i) w.data[i] = 0.03 * (i % 5) - 0.06;
            return ops::weighted_sum(t, seq.data, std::move(w));
        },
        {random_tensor({1, 6, 3}, rng), random_tensor({6}, rng), random_tensor({6}, rng),
         random_tensor({8, 6}, rng), random_tensor({8}, rng)});
    CHECK(err < 1e-4);
}

TEST_CASE("apply_masks is identity when disabled and records spans otherwise") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 19);
    Rng data_rng(21);
    const Tensor x = random_tensor({1, 20, cfg.model_dim}, data_rng);

    {
        Tape t;
        ParamBinder pb(t, m.params, true);
        FrameSeqVar seq{t.leaf(x), {20}, false, {}};
        Rng rng(1);
        FrameSeqVar out = apply_masks(pb, cfg, seq, Mode::train, &rng);
        CHECK(out.data.id == seq.data.id);  // p == 0 for both masks
    }
    {
        EncoderConfig masked = cfg;
        masked.time_mask = {0.15, 3};
        masked.channel_mask = {0.1, 2};
        Tape t;
        ParamBinder pb(t, m.params, true);
        FrameSeqVar seq{t.leaf(x), {20}, false, {}};
        Rng rng(4);
        FrameSeqVar out = apply_masks(pb, masked, seq, Mode::train, &rng);
        REQUIRE(out.masks.per_item.size() == 1);
        const MaskSpans& spans = out.masks.per_item[0];
        std::vector<bool> tm(20, false), cm(cfg.model_dim, false);
        for (Index s : spans.time_starts) {
            for (Index u = s; u < std::min<Index>(20, s + 3); ++u) tm[u] = true;
        }
        for (Index s : spans.channel_starts) {
            for (Index u = s; u < std::min<Index>(cfg.model_dim, s + 2); ++u) cm[u] = true;
        }
        const Tensor& y = t.val(out.data);
        for (Index tt = 0; tt < 20; ++tt) {
            for (Index d = 0; d < cfg.model_dim; ++d) {
                const double expect = (tm[tt] || cm[d]) ? 0.0 : x.data[tt * cfg.model_dim + d];
                CHECK(y.data[tt * cfg.model_dim + d] == expect);
            }
        }
        // eval mode is identity regardless of configuration
        FrameSeqVar ev = apply_masks(pb, masked, seq, Mode::eval, nullptr);
        CHECK(ev.data.id == seq.data.id);
    }
}

TEST_CASE("masked-frame fraction matches the closed form of the sampling rule") {
    EncoderConfig cfg = tiny_cfg();
    cfg.model_dim = 4;
    cfg.pos_conv_groups = 2;
    cfg.heads = 2;
    cfg.time_mask = {0.05, 10};
    cfg.channel_mask = {0.0, 10};
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 23);
    const Index T = 149;
    Rng data_rng(29);
    const Tensor x = random_tensor({1, T, cfg.model_dim}, data_rng);

    double masked_frames = 0.0;
    const int runs = 10000;
    for (int run = 0; run < runs; ++run) {
        Tape t;
        ParamBinder pb(t, m.params, true);
        FrameSeqVar seq{t.leaf(x), {T}, false, {}};
        Rng rng(1000 + run);
        FrameSeqVar out = apply_masks(pb, cfg, seq, Mode::train, &rng);
        const Tensor& y = t.val(out.data);
        for (Index tt = 0; tt < T; ++tt) {
            bool all_zero = true;
            for (Index d = 0; d < cfg.model_dim; ++d) {
                if (y.data[tt * cfg.model_dim + d] != 0.0) {
                    all_zero = false;
                    break;
                }
            }
            if (all_zero) masked_frames += 1.0;
        }
    }
    const double observed = masked_frames / (runs * T);
    // P(frame t masked) = 1 - (1-p)^min(t+1, span)
    double expected = 0.0;
    for (Index tt = 0; tt < T; ++tt) {
        expected += 1.0 - std::pow(1.0 - 0.05, std::min<Index>(tt + 1, 10));
    }
    expected /= T;
    CHECK(std::abs(observed - expected) / expected < 0.05);
}

TEST_CASE("add_positional preserves length and reduces to layer_norm with zero conv") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 31);
    Rng rng(37);
    for (Index T : {5, 6, 17}) {
        Tape t;
        ParamBinder pb(t, m.params, false);
        FrameSeqVar seq{t.leaf(random_tensor({2, T, cfg.model_dim}, rng)), {T, T}, false, {}};
        FrameSeqVar out = add_positional(pb, cfg, seq, Mode::eval, nullptr);
        CHECK(t.val(out.data).shape == std::vector<Index>{2, T, cfg.model_dim});
    }
    {
        SpeakerModel z = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 31);
        for (double& v : z.params.get("positional.conv.weight").data) v = 0.0;
        for (double& v : z.params.get("positional.conv.bias").data) v = 0.0;
        Tape t;
        ParamBinder pb(t, z.params, false);
        const Tensor x = random_tensor({1, 7, cfg.model_dim}, rng);
        FrameSeqVar seq{t.leaf(x), {7}, false, {}};
        FrameSeqVar out = add_positional(pb, cfg, seq, Mode::eval, nullptr);
        // gelu(0) == 0, so the residual adds nothing and only layer_norm acts
        Var ref = ops::layer_norm(t, t.leaf(x), pb("positional.norm.gain"),
                                  pb("positional.norm.offset"), cfg.norm_eps);
        CHECK(max_abs_diff(t.val(out.data), t.val(ref)) == 0.0);
    }
}

TEST_CASE("positional conv spreads one frame across its 128-frame kernel span") {
    // 128 frames at the 20 ms hop is the paper-scale 2.56 s receptive field.
    EncoderConfig cfg = tiny_cfg();
    cfg.pos_conv_kernel = 128;
    cfg.pos_conv_groups = 4;
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 41);
    const Index T = 300, t0 = 150;
    Rng rng(43);
    const Tensor base = random_tensor({1, T, cfg.model_dim}, rng);
    Tensor poked = base;
    for (Index d = 0; d < cfg.model_dim; ++d) poked.data[t0 * cfg.model_dim + d] += 1.0;

    auto run = [&](const Tensor& x) {
        Tape t;
        ParamBinder pb(t, m.params, false);
        FrameSeqVar seq{t.leaf(x), {T}, false, {}};
        return t.val(add_positional(pb, cfg, seq, Mode::eval, nullptr).data);
    };
    const Tensor ya = run(base), yb = run(poked);
    Index lo = T, hi = 0;
    for (Index tt = 0; tt < T; ++tt) {
        for (Index d = 0; d < cfg.model_dim; ++d) {
            if (ya.data[tt * cfg.model_dim + d] != yb.data[tt * cfg.model_dim + d]) {
                lo = std::min(lo, tt);
                hi = std::max(hi, tt);
                break;
            }
        }
    }
    CHECK(hi - lo + 1 == 128);
    CHECK(lo == t0 - 63);
    CHECK(hi == t0 + 64);
}

TEST_CASE("transformer stack: zero layers is identity, eval is deterministic") {
    EncoderConfig cfg = tiny_cfg();
    cfg.layers = 0;
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 47);
    Rng rng(53);
    const Tensor x = random_tensor({1, 5, cfg.model_dim}, rng);
    Tape t;
    ParamBinder pb(t, m.params, false);
    FrameSeqVar seq{t.leaf(x), {5}, false, {}};
    FrameSeqVar out = transformer_stack(pb, cfg, seq, Mode::eval, nullptr);
    CHECK(out.data.id == seq.data.id);
}

TEST_CASE("encode: shapes, valid lengths, cls token, determinism") {
    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 59);

    std::vector<Waveform> ws;
    Rng rng(61);
    for (Index len : {2000, 1800}) {
        Waveform w;
        for (Index j = 0; j < len; ++j) w.samples.push_back(rng.normal());
        ws.push_back(normalize(w));
    }
    const WaveBatch batch = make_wave_batch(ws);

    auto run = [&](const EncoderConfig& c) {
        Tape t;
        ParamBinder pb(t, m.params, false);
        FrameSeqVar seq = encode(pb, c, batch, Mode::eval, nullptr);
        return to_value(t, seq);
    };
    const FrameSequence out = run(cfg);
    CHECK(out.data.shape == std::vector<Index>{2, output_length(2000, cfg), cfg.model_dim});
    CHECK(out.valid_lengths ==
          std::vector<Index>{output_length(2000, cfg), output_length(1800, cfg)});
    CHECK_FALSE(out.has_cls);

    const FrameSequence again = run(cfg);
    CHECK(max_abs_diff(out.data, again.data) == 0.0);  // eval is a pure function

    // cls insertion bumps time and every valid length by one
    EncoderConfig with_cls = cfg;
    with_cls.cls_token = true;
    with_cls.layers = 0;  // keep the inserted token observable at the output
    SpeakerModel m2 = build_model({with_cls, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 59);
    Tape t2;
    ParamBinder pb2(t2, m2.params, false);
    FrameSeqVar seq2 = encode(pb2, with_cls, batch, Mode::eval, nullptr);
    const FrameSequence v2 = to_value(t2, seq2);
    CHECK(v2.data.dim(1) == output_length(2000, cfg) + 1);
    CHECK(v2.valid_lengths ==
          std::vector<Index>{output_length(2000, cfg) + 1, output_length(1800, cfg) + 1});
    CHECK(v2.has_cls);
    for (Index d = 0; d < with_cls.model_dim; ++d) CHECK(v2.data.data[d] == 1.0);
}

TEST_CASE("encode length bookkeeping across 50 random input lengths") {
    EncoderConfig cfg = tiny_cfg();
    cfg.layers = 1;
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 67);
    Rng rng(71);
    for (int i = 0; i < 50; ++i) {
        const Index len = 400 + rng.below(6000);
        Waveform w;
        for (Index j = 0; j < len; ++j) w.samples.push_back(rng.normal());
        const WaveBatch batch = make_wave_batch({normalize(w)});
        Tape t;
        ParamBinder pb(t, m.params, false);
        FrameSeqVar seq = encode(pb, cfg, batch, Mode::eval, nullptr);
        CHECK(t.val(seq.data).dim(1) == output_length(len, cfg));
        CHECK(seq.valid_lengths[0] == output_length(len, cfg));
    }
}

TEST_CASE("tiny encoder end-to-end gradient check") {
    EncoderConfig cfg = tiny_cfg();
    cfg.conv_channels = 3;
    cfg.conv_kernels = {6, 3, 2};
    cfg.conv_strides = {3, 2, 2};
    cfg.model_dim = 16;
    cfg.ffn_dim = 24;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.pos_conv_kernel = 4;
    cfg.pos_conv_groups = 2;
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 73);

    WaveBatch batch = noise_batch(1, 60, 79);

    // FD over every parameter, driving the real encode() path.
    std::vector<std::string> names = encoder_param_names(cfg);
    std::vector<Tensor> inputs;
    for (const auto& n : names) inputs.push_back(m.params.get(n));

    const double err = gradient_check(
        [&](Tape& t, const std::vector<Var>& vs) {
            ParameterStore empty;
            ParamBinder pb(t, empty, true);
            for (Index i = 0; i < names.size(); ++i) pb.bind(names[i], vs[i]);
            FrameSeqVar seq = encode(pb, cfg, batch, Mode::eval, nullptr);
            Tensor w(t.val(seq.data).shape);
            for (Index i = 0; i < w.numel(); ++i) w.data[i] = 0.02 * (i % 7) - 0.05;
            return ops::weighted_sum(t, seq.data, std::move(w));
        },
        inputs);
    CHECK(err < 1e-4);
}

TEST_CASE("frozen extractor binds without gradient") {
    EncoderConfig cfg = tiny_cfg();
    cfg.freeze_feature_extractor = true;
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 83);
    CHECK(m.params.is_frozen("extractor.conv0.weight"));
    CHECK_FALSE(m.params.is_frozen("projector.linear.weight"));

    Tape t;
    ParamBinder pb(t, m.params, true);
    WaveBatch batch = noise_batch(1, 2000, 89);
    FrameSeqVar seq = encode(pb, cfg, batch, Mode::eval, nullptr);
    CHECK_FALSE(t.needs_grad(pb("extractor.conv0.weight")));
    CHECK(t.needs_grad(pb("projector.linear.weight")));

    // Backward reaches the projector but not the extractor.
    Tensor w(t.val(seq.data).shape);
    for (Index i = 0; i < w.numel(); ++i) w.data[i] = 1.0;
    t.backward(ops::weighted_sum(t, seq.data, std::move(w)));
    CHECK(t.grad_if(pb("projector.linear.weight")) != nullptr);
    CHECK(t.grad_if(pb("extractor.conv0.weight")) == nullptr);
}

TEST_CASE("weight manifest round trip and discrepancy reporting") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "spkvec_manifest_test";
    fs::remove_all(dir);

    EncoderConfig cfg = tiny_cfg();
    SpeakerModel m = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 97);
    export_encoder_weights(m.params, cfg, dir);

    SpeakerModel other = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 1234);
    CHECK(max_abs_diff(other.params.get("projector.linear.weight"),
                       m.params.get("projector.linear.weight")) > 0.0);
    const auto unmatched = import_weights(other.params, cfg, dir);
    CHECK(unmatched.empty());
    for (const auto& name : encoder_param_names(cfg)) {
        CHECK(other.params.get(name).data == m.params.get(name).data);
    }

    // Missing entry: drop one parameter from the index.
    {
        const fs::path broken = fs::temp_directory_path() / "spkvec_manifest_missing";
        fs::remove_all(broken);
        fs::create_directories(broken);
        std::ifstream in(dir / "index.txt");
        std::ofstream out(broken / "index.txt");
        std::string line;
        while (std::getline(in, line)) {
            if (line.find("transformer.layer1.ffn.fc1.weight") == std::string::npos) {
                out << line << "\n";
            }
        }
        out.close();
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().filename() != "index.txt") {
                fs::copy_file(e.path(), broken / e.path().filename());
            }
        }
        SpeakerModel victim = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 5);
        CHECK_THROWS_WITH_AS(import_weights(victim.params, cfg, broken),
                             doctest::Contains("transformer.layer1.ffn.fc1.weight"),
                             std::runtime_error);
        fs::remove_all(broken);
    }
    // Transposed projection weight: named shape mismatch.
    {
        SpeakerModel donor = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 6);
        Tensor& w = donor.params.get("projector.linear.weight");
        w = Tensor({w.dim(1), w.dim(0)});
        const fs::path transposed = fs::temp_directory_path() / "spkvec_manifest_transposed";
        fs::remove_all(transposed);
        export_encoder_weights(donor.params, cfg, transposed);
        SpeakerModel victim = build_model({cfg, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 8);
        CHECK_THROWS_WITH_AS(import_weights(victim.params, cfg, transposed),
                             doctest::Contains("shape mismatch for projector.linear.weight"),
                             std::runtime_error);
        fs::remove_all(transposed);
    }
    fs::remove_all(dir);
}

TEST_CASE("regularisation ablations are pure config changes") {
    // layerdrop off, then dropout off, then time masking off: nothing but
    // fields change and the same model still encodes.
    EncoderConfig base = tiny_cfg();
    base.layerdrop_p = 0.05;
    base.dropout_p = 0.1;
    base.time_mask = {0.05, 10};

    EncoderConfig a = base;
    a.layerdrop_p = 0.0;
    EncoderConfig b = a;
    b.dropout_p = 0.0;
    EncoderConfig c = b;
    c.time_mask.probability = 0.0;

    SpeakerModel m = build_model({base, Variant::ce, PoolingMethod::mean, 30, 0.2, 2}, 103);
    WaveBatch batch = noise_batch(1, 2000, 107);
    for (const EncoderConfig* cfg : {&base, &a, &b, &c}) {
        Tape t;
        ParamBinder pb(t, m.params, true);
        Rng rng(5);
        FrameSeqVar seq = encode(pb, *cfg, batch, Mode::train, &rng);
        CHECK(t.val(seq.data).numel() > 0);
    }
    // with all stochastic knobs at zero, train mode equals eval mode
    Tape t1, t2;
    ParamBinder p1(t1, m.params, true), p2(t2, m.params, false);
    Rng rng(5);
    FrameSeqVar s1 = encode(p1, c, batch, Mode::train, &rng);
    FrameSeqVar s2 = encode(p2, c, batch, Mode::eval, nullptr);
    EncoderConfig no_drop = c;  // c still has dropout 0, layerdrop 0, masks 0
    CHECK(max_abs_diff(t1.val(s1.data), t2.val(s2.data)) == 0.0);
}
