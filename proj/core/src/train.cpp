#include "spkvec/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "spkvec/heads.hpp"
#include "spkvec/parallel.hpp"

namespace spkvec {
namespace {

// Crop, then normalize; the batch pipeline order.
Waveform crop_and_normalize(const Waveform& w, Index crop_samples, Rng& rng) {
    return normalize(random_crop(w, crop_samples, rng));
}

void add_grads(Tape& t, ParamBinder& pb, std::map<std::string, Tensor>& grads) {
    for (const auto& [name, var] : pb.bound()) {
        const Tensor* g = t.grad_if(var);
        if (g == nullptr) continue;
        auto it = grads.find(name);
        if (it == grads.end()) {
            grads.emplace(name, *g);
        } else {
            for (Index i = 0; i < g->numel(); ++i) it->second.data[i] += g->data[i];
        }
    }
}

// One classification training step: sub-batches of at most accum_files files,
// each contributing weight n_sub/total to the mean loss.
double classification_step(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus,
                           Rng& rng, std::map<std::string, Tensor>& grads) {
    ClassificationBatch batch = make_classification_batch(corpus, cfg, rng);
    const Index total = batch.crops.size();
    const Index chunk = std::max<Index>(1, cfg.accum_files);
    double loss = 0.0;
    for (Index begin = 0; begin < total; begin += chunk) {
        const Index end = std::min(total, begin + chunk);
        std::vector<Waveform> crops(batch.crops.begin() + begin, batch.crops.begin() + end);
        WaveBatch wb = make_wave_batch(crops);
        wb.valid_lengths.assign(batch.valid_lengths.begin() + begin,
                                batch.valid_lengths.begin() + end);
        const std::vector<Index> targets(batch.targets.begin() + begin,
                                         batch.targets.begin() + end);

        Tape t;
        ParamBinder pb(t, model.params, true);
        FrameSeqVar seq = encode(pb, cfg.model.encoder, wb, Mode::train, &rng);
        Var emb = pool(t, seq, cfg.model.pooling, &rng);
        HeadOutput head = cfg.model.variant == Variant::ce
                              ? ce_forward(pb, emb, targets)
                              : aam_forward(pb, emb, targets, cfg.model.aam_scale,
                                            cfg.model.aam_margin);
        const double weight = static_cast<double>(end - begin) / static_cast<double>(total);
        t.backward(ops::scale(t, head.loss, weight));
        add_grads(t, pb, grads);
        loss += weight * t.val(head.loss).data[0];
    }
    return loss;
}

// One utterance-pair step: every pair runs its own joint pass with weight
// 1/pairs. With a frozen extractor the latents are computed once per crop in
// a no-gradient pass and reused across the pairs that share the crop. Pairs
// are independent tapes, so they run in parallel; each pair draws from its
// own forked stream and keeps its own gradient buffer, merged in pair order,
// which keeps the step bit-identical for any worker count.
double pair_step(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus, Rng& rng,
                 std::map<std::string, Tensor>& grads) {
    const EncoderConfig& enc = cfg.model.encoder;
    PairBatch batch = make_pair_batch(corpus, cfg, rng);
    const Index n_crops = batch.crops.size();
    const bool frozen = enc.freeze_feature_extractor;

    std::vector<Tensor> latents;  // per crop, only when reusable
    if (frozen) {
        WaveBatch wb = make_wave_batch(batch.crops);
        wb.valid_lengths = batch.valid_lengths;
        Tape t;
        ParamBinder pb(t, model.params, false);
        const Tensor all = t.val(extract_features(pb, enc, wb));
        const Index c = all.dim(1), f = all.dim(2);
        for (Index i = 0; i < n_crops; ++i) {
            Tensor one({1, c, f});
            std::copy_n(all.ptr() + i * c * f, c * f, one.ptr());
            latents.push_back(std::move(one));
        }
    }

    const Index n_pairs = batch.pairs.size();
    const double weight = 1.0 / static_cast<double>(n_pairs);
    std::vector<Rng> pair_rngs;
    pair_rngs.reserve(n_pairs);
    {
        const Rng base(rng.bits());
        for (Index p = 0; p < n_pairs; ++p) {
            pair_rngs.push_back(base.fork("pair/" + std::to_string(p)));
        }
    }

    std::vector<std::map<std::string, Tensor>> pair_grads(n_pairs);
    std::vector<double> pair_loss(n_pairs, 0.0);
    parallel_for(n_pairs, [&](Index p0, Index p1) {
        for (Index p = p0; p < p1; ++p) {
            const PairBatch::Pair& pair = batch.pairs[p];
            Rng& prng = pair_rngs[p];
            Tape t;
            ParamBinder pb(t, model.params, true);
            auto side = [&](Index crop) {
                Var latent;
                if (frozen) {
                    latent = t.leaf(latents[crop]);
                } else {
                    std::vector<Waveform> one = {batch.crops[crop]};
                    WaveBatch wb = make_wave_batch(one);
                    wb.valid_lengths = {batch.valid_lengths[crop]};
                    latent = extract_features(pb, enc, wb);
                }
                std::vector<Index> frames = {output_length(batch.valid_lengths[crop], enc)};
                FrameSeqVar seq = project(pb, enc, latent, std::move(frames), Mode::train, &prng);
                seq = apply_masks(pb, enc, seq, Mode::train, &prng);
                return add_positional(pb, enc, seq, Mode::train, &prng);
            };
            FrameSeqVar sa = side(pair.a);
            FrameSeqVar sb = side(pair.b);
            Var logit = pair_forward(pb, enc, sa, sb, Mode::train, &prng);
            Var loss = bce_loss(t, logit, {pair.label});
            t.backward(ops::scale(t, loss, weight));
            add_grads(t, pb, pair_grads[p]);
            pair_loss[p] = t.val(loss).data[0];
        }
    });

    double loss = 0.0;
    for (Index p = 0; p < n_pairs; ++p) {
        loss += weight * pair_loss[p];
        for (auto& [name, g] : pair_grads[p]) {
            auto it = grads.find(name);
            if (it == grads.end()) {
                grads.emplace(name, std::move(g));
            } else {
                for (Index i = 0; i < it->second.numel(); ++i) {
                    it->second.data[i] += g.data[i];
                }
            }
        }
    }
    return loss;
}

}  // namespace

ClassificationBatch make_classification_batch(const CorpusView& corpus, const TrainConfig& cfg,
                                              Rng& rng) {
    const Index total = corpus.rows().size();
    if (total < cfg.files_per_batch) {
        throw std::invalid_argument("corpus has " + std::to_string(total) +
                                    " utterances, fewer than files_per_batch = " +
                                    std::to_string(cfg.files_per_batch));
    }
    // partial Fisher-Yates: files_per_batch distinct rows, uniform
    std::vector<Index> idx(total);
    for (Index i = 0; i < total; ++i) idx[i] = i;
    ClassificationBatch out;
    const Index crop = cfg.crop_samples();
    for (Index k = 0; k < cfg.files_per_batch; ++k) {
        const Index pick = k + rng.below(total - k);
        std::swap(idx[k], idx[pick]);
        const ManifestRow& row = corpus.rows()[idx[k]];
        const Waveform& w = corpus.waveform(row.utterance_id);
        out.crops.push_back(crop_and_normalize(w, crop, rng));
        out.valid_lengths.push_back(std::min<Index>(w.samples.size(), crop));
        out.targets.push_back(corpus.speaker_index(row.speaker_id));
        out.utterance_ids.push_back(row.utterance_id);
    }
    return out;
}

PairBatch make_pair_batch(const CorpusView& corpus, const TrainConfig& cfg, Rng& rng) {
    const PairBatchConfig& pc = cfg.pair;
    std::vector<std::string> eligible;
    for (const std::string& sp : corpus.speakers()) {
        if (corpus.utterances_of(sp).size() >= pc.utts_per_speaker) eligible.push_back(sp);
    }
    if (eligible.size() < pc.speakers) {
        throw std::invalid_argument("pair batch needs " + std::to_string(pc.speakers) +
                                    " speakers with >= " + std::to_string(pc.utts_per_speaker) +
                                    " utterances, corpus has " + std::to_string(eligible.size()));
    }

    PairBatch out;
    const Index crop = cfg.crop_samples();
    // sample speakers, then utterances within each, all without replacement
    for (Index k = 0; k < pc.speakers; ++k) {
        const Index pick = k + rng.below(eligible.size() - k);
        std::swap(eligible[k], eligible[pick]);
        const std::string& sp = eligible[k];
        std::vector<Index> utts = corpus.utterances_of(sp);
        for (Index u = 0; u < pc.utts_per_speaker; ++u) {
            const Index upick = u + rng.below(utts.size() - u);
            std::swap(utts[u], utts[upick]);
            const ManifestRow& row = corpus.rows()[utts[u]];
            const Waveform& w = corpus.waveform(row.utterance_id);
            out.crops.push_back(crop_and_normalize(w, crop, rng));
            out.valid_lengths.push_back(std::min<Index>(w.samples.size(), crop));
            out.crop_utterances.push_back(row.utterance_id);
            out.crop_speakers.push_back(row.speaker_id);
        }
    }

    // enumerate candidate pairs over the crops, shuffle, take the quota
    std::vector<PairBatch::Pair> same, diff;
    for (Index i = 0; i < out.crops.size(); ++i) {
        for (Index j = i + 1; j < out.crops.size(); ++j) {
            if (out.crop_speakers[i] == out.crop_speakers[j]) {
                same.push_back({i, j, TrialLabel::same});
            } else {
                diff.push_back({i, j, TrialLabel::different});
            }
        }
    }
    auto shuffle = [&rng](std::vector<PairBatch::Pair>& v) {
        for (Index i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    };
    shuffle(same);
    shuffle(diff);
    if (same.size() < pc.same_pairs || diff.size() < pc.diff_pairs) {
        throw std::invalid_argument("pair batch cannot supply " + std::to_string(pc.same_pairs) +
                                    "+" + std::to_string(pc.diff_pairs) + " unique pairs");
    }
    out.pairs.assign(same.begin(), same.begin() + pc.same_pairs);
    out.pairs.insert(out.pairs.end(), diff.begin(), diff.begin() + pc.diff_pairs);
    return out;
}

double train_single_step(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus,
                         Rng& rng, AdamState& opt, double lr) {
    std::map<std::string, Tensor> grads;
    const double loss = cfg.model.variant == Variant::bce
                            ? pair_step(model, cfg, corpus, rng, grads)
                            : classification_step(model, cfg, corpus, rng, grads);
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite training loss");
    adam_step(model.params, grads, cfg.adam, lr, opt);
    return loss;
}

TrainResult train_run(SpeakerModel& model, const TrainConfig& cfg, const CorpusView& corpus,
                      const TrialList& validation) {
    ScheduleSpec sched = cfg.schedule;
    sched.total_steps = cfg.iterations;
    if (cfg.iterations > 0) {
        const auto bad = validate_schedule(sched);
        if (!bad.empty()) {
            std::string msg = "invalid schedule:";
            for (const auto& b : bad) msg += "\n  - " + b;
            throw std::invalid_argument(msg);
        }
    }
    const Index interval = cfg.validation_interval > 0 ? cfg.validation_interval
                                                       : std::max<Index>(1, cfg.iterations / 10);
    Rng train_rng(cfg.seed);
    const Rng val_base(cfg.seed ^ 0x76616c6964ull);

    TrainResult out;
    AdamState opt;
    auto snapshot = [&](Index step, double eer) {
        CheckpointData d;
        for (const auto& [name, tensor] : model.params) d.parameters.emplace(name, tensor);
        d.opt = opt;
        d.step = step;
        d.validation_eer = eer;
        return d;
    };

    bool have_best = false;
    for (Index step = 0; step < cfg.iterations; ++step) {
        const double lr = lr_at(sched, step);
        MetricsRow row{step, 0.0, lr, -1.0};
        try {
            row.loss = train_single_step(model, cfg, corpus, train_rng, opt, lr);
        } catch (const std::runtime_error& e) {
            // divergence guard: record the partial log and stop
            out.diverged = true;
            out.divergence_note = e.what();
            out.log.push_back(row);
            break;
        }
        const bool last = step + 1 == cfg.iterations;
        if ((step + 1) % interval == 0 || last) {
            Rng vr = val_base.fork("validation/" + std::to_string(step));
            const TrialEvaluation ev = evaluate_trials(model, validation, corpus,
                                                       cfg.model.pooling, &vr,
                                                       cfg.eval_crop_samples);
            row.validation_eer = ev.eer.eer;
            if (!have_best || ev.eer.eer < out.best.validation_eer) {
                out.best = snapshot(step + 1, ev.eer.eer);
                have_best = true;
            }
        }
        out.log.push_back(row);
    }
    out.final_state = snapshot(cfg.iterations,
                               out.log.empty() ? std::numeric_limits<double>::quiet_NaN()
                                               : out.log.back().validation_eer);
    if (!have_best) out.best = out.final_state;
    return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& log, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "step,loss,lr,validation_eer\n";
    f.precision(17);
    for (const MetricsRow& row : log) {
        f << row.step << "," << row.loss << "," << row.lr << ",";
        if (row.validation_eer >= 0.0) f << row.validation_eer;
        f << "\n";
    }
}

void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& data,
                     const std::string& fingerprint, const std::string& config_text) {
    std::filesystem::create_directories(dir);
    save_manifest(data.parameters, dir / "params");
    std::map<std::string, Tensor> opt_arrays;
    for (const auto& [name, tensor] : data.opt.m) opt_arrays.emplace("m." + name, tensor);
    for (const auto& [name, tensor] : data.opt.v) opt_arrays.emplace("v." + name, tensor);
    save_manifest(opt_arrays, dir / "optim");

    std::ofstream header(dir / "checkpoint.txt");
    if (!header) throw std::runtime_error("cannot write checkpoint header in " + dir.string());
    header.precision(17);
    header << "step " << data.step << "\n";
    header << "adam_step " << data.opt.step << "\n";
    header << "validation_eer " << data.validation_eer << "\n";
    header << "fingerprint " << fingerprint << "\n";

    std::ofstream config(dir / "config.txt");
    if (!config) throw std::runtime_error("cannot write checkpoint config in " + dir.string());
    config << config_text;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    LoadedCheckpoint out;
    std::ifstream header(dir / "checkpoint.txt");
    if (!header) throw std::runtime_error("no checkpoint header at " + dir.string());
    std::string key;
    while (header >> key) {
        if (key == "step") {
            header >> out.data.step;
        } else if (key == "adam_step") {
            header >> out.data.opt.step;
        } else if (key == "validation_eer") {
            header >> out.data.validation_eer;
        } else if (key == "fingerprint") {
            header >> out.fingerprint;
        } else {
            std::string skip;
            header >> skip;
        }
    }
    out.data.parameters = load_manifest(dir / "params");
    for (auto& [name, tensor] : load_manifest(dir / "optim")) {
        if (name.rfind("m.", 0) == 0) {
            out.data.opt.m.emplace(name.substr(2), std::move(tensor));
        } else if (name.rfind("v.", 0) == 0) {
            out.data.opt.v.emplace(name.substr(2), std::move(tensor));
        }
    }
    std::ifstream config(dir / "config.txt");
    if (config) {
        std::ostringstream ss;
        ss << config.rdbuf();
        out.config_text = ss.str();
    }
    return out;
}

void restore_parameters(SpeakerModel& model, const CheckpointData& data) {
    std::vector<std::string> problems;
    for (const auto& [name, tensor] : model.params) {
        auto it = data.parameters.find(name);
        if (it == data.parameters.end()) {
            problems.push_back("checkpoint is missing parameter " + name);
        } else if (it->second.shape != tensor.shape) {
            problems.push_back("checkpoint parameter " + name + " has shape " +
                               shape_str(it->second.shape) + ", model expects " +
                               shape_str(tensor.shape));
        }
    }
    for (const auto& [name, tensor] : data.parameters) {
        if (!model.params.has(name)) {
            problems.push_back("checkpoint carries unknown parameter " + name);
        }
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint does not fit the model:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw std::runtime_error(msg);
    }
    for (const auto& [name, tensor] : data.parameters) model.params.get(name) = tensor;
}

std::vector<std::string> ablation_names() {
    return {"unfrozen_extractor",
            "random_init",
            "no_layerdrop",
            "no_layerdrop_dropout",
            "no_layerdrop_dropout_timemask",
            "batch_half_200k",
            "batch_double_50k",
            "lr_constant_1e-5",
            "lr_constant_3e-6",
            "lr_exp_decay",
            "lr_tri_stage"};
}

TrainConfig apply_ablation(const TrainConfig& base, const std::string& name) {
    TrainConfig out = base;
    if (name == "unfrozen_extractor") {
        out.model.encoder.freeze_feature_extractor = false;
    } else if (name == "random_init") {
        out.model.encoder.freeze_feature_extractor = false;
        out.init_weights.clear();
    } else if (name == "no_layerdrop") {
        out.model.encoder.layerdrop_p = 0.0;
    } else if (name == "no_layerdrop_dropout") {
        out.model.encoder.layerdrop_p = 0.0;
        out.model.encoder.dropout_p = 0.0;
    } else if (name == "no_layerdrop_dropout_timemask") {
        out.model.encoder.layerdrop_p = 0.0;
        out.model.encoder.dropout_p = 0.0;
        out.model.encoder.time_mask.probability = 0.0;
    } else if (name == "batch_half_200k") {
        out.files_per_batch = base.files_per_batch / 2;
        out.iterations = base.iterations * 2;
    } else if (name == "batch_double_50k") {
        out.files_per_batch = base.files_per_batch * 2;
        out.iterations = base.iterations / 2;
    } else if (name == "lr_constant_1e-5") {
        out.schedule.kind = ScheduleKind::constant;
        out.schedule.lr = 1e-5;
    } else if (name == "lr_constant_3e-6") {
        out.schedule.kind = ScheduleKind::constant;
        out.schedule.lr = 3e-6;
    } else if (name == "lr_exp_decay") {
        out.schedule.kind = ScheduleKind::exponential_decay;
        out.schedule.lr_start = 1e-5;
        out.schedule.lr_end = 3e-6;
    } else if (name == "lr_tri_stage") {
        out.schedule.kind = ScheduleKind::tri_stage;
        out.schedule.lr_floor_init = 1e-7;
        out.schedule.lr_peak = 1e-5;
        out.schedule.lr_floor_final = 1e-7;
        out.schedule.warmup_steps = base.iterations / 10;
        out.schedule.hold_steps = base.iterations * 2 / 5;
    } else {
        std::string msg = "unknown ablation '" + name + "'; valid names:";
        for (const std::string& n : ablation_names()) msg += " " + n;
        throw std::invalid_argument(msg);
    }
    return out;
}

}  // namespace spkvec
