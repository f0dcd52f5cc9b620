// Command-line entry point: corpus generation, training, LR range tests,
// evaluation, and ablation runs over a declarative config file.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "spkvec/config.hpp"
#include "spkvec/eval.hpp"
#include "spkvec/schedule.hpp"
#include "spkvec/train.hpp"

namespace fs = std::filesystem;
using namespace spkvec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNoDescent = 2;
constexpr int kExitDiverged = 3;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

// Shared flag overrides applied on top of the config file.
struct Overrides {
    std::string out, corpus, trials;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
    RunConfig cfg = load_config_file(config_path);
    if (!ov.out.empty()) cfg.out_dir = ov.out;
    if (!ov.corpus.empty()) cfg.corpus_dir = ov.corpus;
    if (!ov.trials.empty()) cfg.trials_path = ov.trials;
    if (ov.seed_set) cfg.train.seed = ov.seed;
    return cfg;
}

void reject_if_invalid(const RunConfig& cfg) {
    const auto problems = config_problems(cfg);
    if (problems.empty()) return;
    std::string msg = "config validation failed:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
}

SpeakerModel build_from_config(const RunConfig& cfg, const CorpusView& corpus) {
    ModelConfig mc = cfg.train.model;
    if (mc.variant != Variant::bce) {
        mc.num_classes = corpus.speakers().size();
    }
    SpeakerModel model = build_model(mc, cfg.train.seed);
    if (!cfg.train.init_weights.empty()) {
        const auto unmatched = import_weights(model.params, mc.encoder, cfg.train.init_weights);
        for (const std::string& name : unmatched) {
            std::cerr << "note: manifest entry '" << name << "' matched no encoder parameter\n";
        }
    }
    return model;
}

int cmd_generate_corpus(const std::string& out, Index speakers, Index utts, double duration,
                        std::uint64_t seed, Index trials_per_class, bool force) {
    const fs::path dir(out);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            throw std::runtime_error("output directory " + out +
                                     " exists and is not empty (use --force to overwrite)");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    const SyntheticCorpus corpus =
        generate_synthetic_corpus(dir, speakers, utts, duration, seed);
    write_corpus_manifest(corpus, dir);
    Rng val_rng = Rng(seed).fork("validation-trials");
    Rng test_rng = Rng(seed).fork("test-trials");
    write_trials(sample_trials(corpus, trials_per_class, trials_per_class, val_rng),
                 dir / "val_trials.txt");
    write_trials(sample_trials(corpus, trials_per_class, trials_per_class, test_rng),
                 dir / "test_trials.txt");
    std::cout << "corpus: " << corpus.manifest.size() << " utterances over " << speakers
              << " speakers in " << out << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const Overrides& ov) {
    RunConfig cfg = resolve_config(config_path, ov);
    reject_if_invalid(cfg);
    if (cfg.out_dir.empty()) throw std::invalid_argument("no output directory (set out = ...)");
    if (cfg.corpus_dir.empty()) throw std::invalid_argument("no corpus directory (set corpus = ...)");
    if (cfg.trials_path.empty()) throw std::invalid_argument("no validation trials (set trials = ...)");

    const CorpusView corpus = CorpusView::load(cfg.corpus_dir);
    const TrialList validation = parse_trials(cfg.trials_path);
    SpeakerModel model = build_from_config(cfg, corpus);

    fs::create_directories(cfg.out_dir);
    const std::string resolved = serialize_config(cfg);
    write_text(fs::path(cfg.out_dir) / "resolved_config.txt", resolved);

    TrainResult result = train_run(model, cfg.train, corpus, validation);
    write_metrics_csv(result.log, fs::path(cfg.out_dir) / "metrics.csv");
    const std::string fp = config_fingerprint(model.cfg);
    save_checkpoint(fs::path(cfg.out_dir) / "checkpoint_best", result.best, fp, resolved);
    save_checkpoint(fs::path(cfg.out_dir) / "checkpoint_final", result.final_state, fp, resolved);

    if (result.diverged) {
        std::cerr << "run diverged: " << result.divergence_note << " (partial log recorded)\n";
        return kExitDiverged;
    }
    std::cout << "trained " << cfg.train.iterations << " iterations; best validation EER "
              << result.best.validation_eer << " at step " << result.best.step << "\n";
    return kExitOk;
}

int cmd_lr_range_test(const std::string& config_path, const Overrides& ov, Index steps,
                      double min_lr, double max_lr) {
    RunConfig cfg = resolve_config(config_path, ov);
    reject_if_invalid(cfg);
    if (cfg.out_dir.empty()) throw std::invalid_argument("no output directory (set out = ...)");
    const CorpusView corpus = CorpusView::load(cfg.corpus_dir);
    SpeakerModel model = build_from_config(cfg, corpus);

    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "resolved_config.txt", serialize_config(cfg));

    // One training step per swept LR on the freshly initialized model; a
    // diverged step surfaces as an infinite loss so the sweep truncates.
    Rng step_rng(cfg.train.seed);
    AdamState state;
    auto fn = [&](double lr) {
        try {
            return train_single_step(model, cfg.train, corpus, step_rng, state, lr);
        } catch (const std::runtime_error&) {
            return std::numeric_limits<double>::infinity();
        }
    };
    const RangeTestResult result = lr_range_test(fn, steps, min_lr, max_lr);

    write_range_test_csv(result, fs::path(cfg.out_dir) / "range_test.csv");
    std::ostringstream report;
    report.precision(17);
    if (result.has_suggestion) {
        report << "suggested_lr " << result.suggested_lr << "\n";
        report << "grid";
        for (double g : result.grid) report << " " << g;
        report << "\n";
    } else {
        report << "no_descent\n";
    }
    if (result.diverged) report << "diverged_after " << result.rows.size() << "\n";
    write_text(fs::path(cfg.out_dir) / "range_test.txt", report.str());
    std::cout << report.str();
    if (!result.has_suggestion) {
        std::cerr << "the loss never decreased over the sweep; no suggestion\n";
        return kExitNoDescent;
    }
    return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& trials_path,
                 const std::string& corpus_dir, const std::string& out,
                 const std::string& pooling_override, Index repeats, std::uint64_t seed) {
    const LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    RunConfig cfg = parse_config_text(loaded.config_text, checkpoint + "/config.txt");
    if (!corpus_dir.empty()) cfg.corpus_dir = corpus_dir;
    if (!trials_path.empty()) cfg.trials_path = trials_path;
    if (cfg.corpus_dir.empty()) throw std::invalid_argument("no corpus directory given");
    if (cfg.trials_path.empty()) throw std::invalid_argument("no trial list given");

    const CorpusView corpus = CorpusView::load(cfg.corpus_dir);
    ModelConfig mc = cfg.train.model;
    if (mc.variant != Variant::bce) mc.num_classes = corpus.speakers().size();
    const std::string expected_fp = config_fingerprint(mc);
    if (expected_fp != loaded.fingerprint) {
        throw std::runtime_error("checkpoint fingerprint " + loaded.fingerprint +
                                 " does not match the architecture fingerprint " + expected_fp +
                                 "; refusing to score with a mismatched model");
    }
    SpeakerModel model = build_model(mc, cfg.train.seed);
    restore_parameters(model, loaded.data);

    const PoolingMethod pooling =
        pooling_override.empty() ? mc.pooling : pooling_from_name(pooling_override);
    const TrialList trials = parse_trials(cfg.trials_path);
    Index same = 0, diff = 0;
    for (const Trial& t : trials.trials) (t.label == TrialLabel::same ? same : diff) += 1;

    fs::create_directories(out);
    write_text(fs::path(out) / "resolved_config.txt", serialize_config(cfg));
    std::ostringstream report;
    report.precision(17);
    const Rng base(seed);
    for (Index rep = 0; rep < repeats; ++rep) {
        Rng rng = base.fork("evaluation/" + std::to_string(rep));
        const TrialEvaluation ev = evaluate_trials(model, trials, corpus, pooling, &rng,
                                                   cfg.train.eval_crop_samples);
        const fs::path scores_path =
            repeats == 1 ? fs::path(out) / "scores.txt"
                         : fs::path(out) / ("scores_r" + std::to_string(rep) + ".txt");
        write_scores(ev.scores, scores_path);
        report << "eer " << ev.eer.eer << " threshold " << ev.eer.threshold << " pooling "
               << pooling_name(pooling) << " repeat " << rep << "\n";
        if (!std::isfinite(ev.eer.eer)) throw std::runtime_error("non-finite EER");
    }
    write_text(fs::path(out) / "eer_report.txt",
               report.str() + "same_trials " + std::to_string(same) + "\ndifferent_trials " +
                   std::to_string(diff) + "\n");
    std::cout << report.str();
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& name, const Overrides& ov) {
    RunConfig base = resolve_config(config_path, ov);
    RunConfig ablated = base;
    ablated.train = apply_ablation(base.train, name);
    ablated.out_dir = (fs::path(base.out_dir) / name).string();
    reject_if_invalid(ablated);

    fs::create_directories(ablated.out_dir);
    write_text(fs::path(ablated.out_dir) / "resolved_config.txt", serialize_config(ablated));

    const CorpusView corpus = CorpusView::load(ablated.corpus_dir);
    const TrialList validation = parse_trials(ablated.trials_path);
    SpeakerModel model = build_from_config(ablated, corpus);

    TrainResult result = train_run(model, ablated.train, corpus, validation);
    write_metrics_csv(result.log, fs::path(ablated.out_dir) / "metrics.csv");
    const std::string fp = config_fingerprint(model.cfg);
    const std::string resolved = serialize_config(ablated);
    save_checkpoint(fs::path(ablated.out_dir) / "checkpoint_best", result.best, fp, resolved);
    save_checkpoint(fs::path(ablated.out_dir) / "checkpoint_final", result.final_state, fp,
                    resolved);
    if (result.diverged) {
        std::cerr << "ablation '" << name << "' diverged: " << result.divergence_note << "\n";
        return kExitDiverged;
    }

    // score the held-out list when one is configured, else the validation list
    const std::string trials =
        ablated.test_trials_path.empty() ? ablated.trials_path : ablated.test_trials_path;
    return cmd_evaluate((fs::path(ablated.out_dir) / "checkpoint_best").string(), trials,
                        ablated.corpus_dir, (fs::path(ablated.out_dir) / "eval").string(), "", 1,
                        ablated.train.seed);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"wav2vec2-style speaker verification: train, evaluate, ablate"};
    app.require_subcommand(1);

    // generate-corpus
    auto* gen = app.add_subcommand("generate-corpus", "synthesize a labeled speaker corpus");
    std::string gen_out;
    Index gen_speakers = 20, gen_utts = 10, gen_trials = 250;
    double gen_duration = 3.0;
    std::uint64_t gen_seed = 1;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--speakers", gen_speakers, "number of speakers (>= 2)");
    gen->add_option("--utts", gen_utts, "utterances per speaker (>= 2)");
    gen->add_option("--duration", gen_duration, "utterance length in seconds");
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--trials-per-class", gen_trials, "same/different pairs per trial list");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    Overrides ov;
    std::string config_path;
    auto add_common = [&](CLI::App* cmd, bool need_config) {
        if (need_config) cmd->add_option("--config", config_path, "config file")->required();
        cmd->add_option("--out", ov.out, "output directory override");
        cmd->add_option("--corpus", ov.corpus, "corpus directory override");
        cmd->add_option("--trials", ov.trials, "trial list override");
        cmd->add_option("--seed", ov.seed, "seed override")->each([&](const std::string&) {
            ov.seed_set = true;
        });
    };

    auto* train = app.add_subcommand("train", "train a variant per the config file");
    add_common(train, true);

    auto* rt = app.add_subcommand("lr-range-test", "sweep the LR and suggest a maximum");
    add_common(rt, true);
    Index rt_steps = 5000;
    double rt_min = 1e-7, rt_max = 1.0;
    rt->add_option("--steps", rt_steps, "sweep length (default 5000)");
    rt->add_option("--min-lr", rt_min, "sweep start");
    rt->add_option("--max-lr", rt_max, "sweep end");

    auto* ev = app.add_subcommand("evaluate", "score a trial list with a checkpoint");
    std::string ev_checkpoint, ev_trials, ev_corpus, ev_out, ev_pooling;
    Index ev_repeats = 1;
    std::uint64_t ev_seed = 1;
    ev->add_option("--checkpoint", ev_checkpoint, "checkpoint directory")->required();
    ev->add_option("--trials", ev_trials, "trial list");
    ev->add_option("--corpus", ev_corpus, "corpus directory");
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--pooling", ev_pooling, "pooling override (e.g. random)");
    ev->add_option("--repeats", ev_repeats, "independent evaluation repeats");
    ev->add_option("--seed", ev_seed, "evaluation seed (random pooling)");

    auto* ab = app.add_subcommand("ablate", "train + evaluate one named ablation");
    std::string ab_name;
    ab->add_option("name", ab_name, "ablation name")->required();
    add_common(ab, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_generate_corpus(gen_out, gen_speakers, gen_utts, gen_duration, gen_seed,
                                       gen_trials, gen_force);
        }
        if (train->parsed()) return cmd_train(config_path, ov);
        if (rt->parsed()) return cmd_lr_range_test(config_path, ov, rt_steps, rt_min, rt_max);
        if (ev->parsed()) {
            return cmd_evaluate(ev_checkpoint, ev_trials, ev_corpus, ev_out, ev_pooling,
                                ev_repeats, ev_seed);
        }
        if (ab->parsed()) return cmd_ablate(config_path, ab_name, ov);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
