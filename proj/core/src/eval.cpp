#include "spkvec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "spkvec/heads.hpp"

namespace spkvec {

double cosine_score(const SpeakerEmbedding& a, const SpeakerEmbedding& b) {
    if (a.values.size() != b.values.size()) {
        throw std::invalid_argument("cosine_score: dimensionality mismatch (" +
                                    std::to_string(a.values.size()) + " vs " +
                                    std::to_string(b.values.size()) + ")");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw std::domain_error("cosine_score: zero-norm embedding (" +
                                (na == 0.0 ? a.utterance_id : b.utterance_id) + ")");
    }
    return dot / std::sqrt(na * nb);
}

EerResult compute_eer(const std::vector<TrialScore>& scores) {
    std::vector<double> same, diff;
    for (const TrialScore& s : scores) {
        if (!std::isfinite(s.score)) {
            throw std::invalid_argument("compute_eer: non-finite score for trial " +
                                        s.trial.id_a + " / " + s.trial.id_b);
        }
        (s.trial.label == TrialLabel::same ? same : diff).push_back(s.score);
    }
    if (same.empty() || diff.empty()) {
        throw std::invalid_argument("compute_eer: need at least one same and one different trial");
    }
    std::sort(same.begin(), same.end());
    std::sort(diff.begin(), diff.end());

    std::vector<double> uniq;
    uniq.reserve(scores.size());
    for (const TrialScore& s : scores) uniq.push_back(s.score);
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    EerResult out;
    out.thresholds = uniq;
    out.far_curve.resize(uniq.size());
    out.frr_curve.resize(uniq.size());
    const double nd = static_cast<double>(diff.size());
    const double ns = static_cast<double>(same.size());
    for (std::size_t i = 0; i < uniq.size(); ++i) {
        const double th = uniq[i];
        // strictly-above / strictly-below counts: trials at the threshold
        // are errors for neither side
        const auto above = diff.end() - std::upper_bound(diff.begin(), diff.end(), th);
        const auto below = std::lower_bound(same.begin(), same.end(), th) - same.begin();
        out.far_curve[i] = static_cast<double>(above) / nd;
        out.frr_curve[i] = static_cast<double>(below) / ns;
    }

    // far - frr is non-increasing, >= 0 at the lowest score and <= 0 at the
    // highest; walk to the first sign change.
    for (std::size_t i = 0; i < uniq.size(); ++i) {
        const double d = out.far_curve[i] - out.frr_curve[i];
        if (d > 0.0) continue;
        if (d == 0.0 || i == 0) {
            out.eer = out.far_curve[i];
            out.threshold = uniq[i];
        } else {
            const double da = out.far_curve[i - 1] - out.frr_curve[i - 1];
            const double db = d;
            const double t = da / (da - db);
            out.eer = out.far_curve[i - 1] + (out.far_curve[i] - out.far_curve[i - 1]) * t;
            out.threshold = uniq[i - 1] + (uniq[i] - uniq[i - 1]) * t;
        }
        return out;
    }
    // far stays above frr through the last score: everything crossed at the top
    out.eer = out.far_curve.back();
    out.threshold = uniq.back();
    return out;
}

namespace {

FrameSequence pre_transformer_sequence(SpeakerModel& model, const Waveform& w,
                                       Index crop_samples) {
    Waveform use = w;
    if (crop_samples > 0 && use.samples.size() > crop_samples) {
        use.samples.resize(crop_samples);
    }
    const WaveBatch batch = make_wave_batch({normalize(use)});
    Tape t;
    ParamBinder pb(t, model.params, false);
    const EncoderConfig& cfg = model.cfg.encoder;
    std::vector<Index> frames = {output_length(batch.valid_lengths[0], cfg)};
    Var latent = extract_features(pb, cfg, batch);
    FrameSeqVar seq = project(pb, cfg, latent, std::move(frames), Mode::eval, nullptr);
    seq = add_positional(pb, cfg, seq, Mode::eval, nullptr);
    return to_value(t, seq);
}

}  // namespace

TrialEvaluation evaluate_trials(SpeakerModel& model, const TrialList& trials,
                                const CorpusView& corpus, PoolingMethod pooling, Rng* rng,
                                Index crop_samples) {
    TrialEvaluation out;
    out.scores.reserve(trials.trials.size());

    if (model.cfg.variant == Variant::bce) {
        std::map<std::string, FrameSequence> cache;
        auto sequence_of = [&](const std::string& id) -> const FrameSequence& {
            auto it = cache.find(id);
            if (it == cache.end()) {
                const Waveform& w = corpus.waveform(id);  // throws naming a missing id
                it = cache.emplace(id, pre_transformer_sequence(model, w, crop_samples)).first;
            }
            return it->second;
        };
        for (const Trial& trial : trials.trials) {
            const FrameSequence& sa = sequence_of(trial.id_a);
            const FrameSequence& sb = sequence_of(trial.id_b);
            Tape t;
            ParamBinder pb(t, model.params, false);
            FrameSeqVar va{t.leaf(sa.data), sa.valid_lengths, sa.has_cls, {}};
            FrameSeqVar vb{t.leaf(sb.data), sb.valid_lengths, sb.has_cls, {}};
            Var logit = pair_forward(pb, model.cfg.encoder, va, vb, Mode::eval, nullptr);
            out.scores.push_back({trial, t.val(logit).data[0]});
        }
    } else {
        std::map<std::string, SpeakerEmbedding> cache;
        auto embedding_of = [&](const std::string& id) -> const SpeakerEmbedding& {
            auto it = cache.find(id);
            if (it == cache.end()) {
                Waveform w = corpus.waveform(id);
                if (crop_samples > 0 && w.samples.size() > crop_samples) {
                    w.samples.resize(crop_samples);
                }
                it = cache.emplace(id, embed_utterance(model, w, pooling, rng)).first;
            }
            return it->second;
        };
        for (const Trial& trial : trials.trials) {
            const double score =
                cosine_score(embedding_of(trial.id_a), embedding_of(trial.id_b));
            out.scores.push_back({trial, score});
        }
    }
    out.eer = compute_eer(out.scores);
    return out;
}

void write_scores(const std::vector<TrialScore>& scores, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.precision(17);
    for (const TrialScore& s : scores) {
        f << s.score << " " << s.trial.id_a << " " << s.trial.id_b << "\n";
    }
}

void write_eer_report(const EerResult& result, Index same_trials, Index diff_trials,
                      const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.precision(17);
    f << "eer " << result.eer << "\n";
    f << "threshold " << result.threshold << "\n";
    f << "same_trials " << same_trials << "\n";
    f << "different_trials " << diff_trials << "\n";
}

}  // namespace spkvec
