#include "spkvec/audio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace spkvec {
namespace {

constexpr double kTwoPi = 6.283185307179586476925;

std::string zero_pad(Index v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

struct SpeakerVoice {
    double f0;
    double amp[4];  // harmonic amplitude profile
};

// Fundamentals sit on a log grid over [110, 300] Hz, assigned by a seeded
// permutation with per-speaker jitter. The grid keeps speakers apart in
// frequency so the corpus stays separable at any speaker count the desk
// experiments use; everything else about the voice is drawn at random.
std::vector<double> fundamental_grid(Index speakers, Rng seed_rng) {
    std::vector<Index> slot(speakers);
    for (Index i = 0; i < speakers; ++i) slot[i] = i;
    Rng perm = seed_rng.fork("f0-permutation");
    for (Index i = speakers; i > 1; --i) {
        std::swap(slot[i - 1], slot[perm.below(i)]);
    }
    std::vector<double> f0(speakers);
    for (Index i = 0; i < speakers; ++i) {
        const double frac = speakers > 1 ? static_cast<double>(slot[i]) / (speakers - 1) : 0.5;
        f0[i] = 110.0 * std::pow(300.0 / 110.0, frac);
    }
    return f0;
}

SpeakerVoice make_voice(Rng speaker_rng, double grid_f0) {
    SpeakerVoice v;
    v.f0 = grid_f0 * (1.0 + 0.01 * (speaker_rng.uniform() - 0.5));
    const double formant = speaker_rng.uniform(250.0, 1000.0);
    const double bandwidth = speaker_rng.uniform(100.0, 300.0);
    double peak = 0.0;
    for (int h = 0; h < 4; ++h) {
        const double freq = v.f0 * (h + 1);
        const double resonance = std::exp(-0.5 * std::pow((freq - formant) / bandwidth, 2.0));
        v.amp[h] = (0.35 + resonance) / std::sqrt(static_cast<double>(h + 1));
        peak = std::max(peak, v.amp[h]);
    }
    for (double& a : v.amp) a /= peak;
    return v;
}

std::vector<double> synthesize_utterance(const SpeakerVoice& voice, Index samples,
                                         Rng utt_rng) {
    double phase[4], gain[4];
    for (int h = 0; h < 4; ++h) {
        phase[h] = utt_rng.uniform(0.0, kTwoPi);
        gain[h] = voice.amp[h] * (1.0 + 0.1 * utt_rng.normal());
    }
    std::vector<double> s(samples);
    double power = 0.0;
    for (Index i = 0; i < samples; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        double v = 0.0;
        for (int h = 0; h < 4; ++h) v += gain[h] * std::sin(kTwoPi * voice.f0 * (h + 1) * t + phase[h]);
        s[i] = v;
        power += v * v;
    }
    const double rms = std::sqrt(power / std::max<Index>(samples, 1));
    const double noise_std = rms / 10.0;  // 20 dB SNR
    double peak = 0.0;
    for (double& v : s) {
        v += noise_std * utt_rng.normal();
        peak = std::max(peak, std::abs(v));
    }
    // Headroom, then snap to the float32 grid so a written file reloads
    // bit-identically.
    const double scale = peak > 0.0 ? 0.5 / peak : 1.0;
    for (double& v : s) v = static_cast<double>(static_cast<float>(v * scale));
    return s;
}

}  // namespace

Waveform normalize(const Waveform& w) {
    if (w.samples.empty()) throw std::invalid_argument("normalize: empty waveform");
    const Index n = w.samples.size();
    double mean = 0.0;
    for (double v : w.samples) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : w.samples) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    Waveform out = w;
    if (var == 0.0) {
        std::fill(out.samples.begin(), out.samples.end(), 0.0);
        return out;
    }
    const double inv_std = 1.0 / std::sqrt(var);
    for (double& v : out.samples) v = (v - mean) * inv_std;
    return out;
}

Waveform random_crop(const Waveform& w, Index crop_samples, Rng& rng) {
    if (crop_samples == 0) throw std::invalid_argument("random_crop: crop_samples must be >= 1");
    Waveform out = w;
    const Index n = w.samples.size();
    if (n >= crop_samples) {
        const Index offset = rng.below(n - crop_samples + 1);
        out.samples.assign(w.samples.begin() + offset, w.samples.begin() + offset + crop_samples);
    } else {
        out.samples.resize(crop_samples, 0.0);
    }
    return out;
}

WaveBatch make_wave_batch(const std::vector<Waveform>& items) {
    if (items.empty()) throw std::invalid_argument("make_wave_batch: no items");
    Index longest = 0;
    for (const Waveform& w : items) longest = std::max(longest, Index(w.samples.size()));
    WaveBatch batch;
    batch.data = Tensor({items.size(), longest});
    for (Index i = 0; i < items.size(); ++i) {
        const Waveform& w = items[i];
        std::copy(w.samples.begin(), w.samples.end(), batch.data.ptr() + i * longest);
        batch.valid_lengths.push_back(w.samples.size());
        batch.speaker_ids.push_back(w.speaker_id);
    }
    return batch;
}

SyntheticCorpus generate_synthetic_corpus(const std::filesystem::path& out_dir, Index speakers,
                                          Index utts_per_speaker, double duration_s,
                                          std::uint64_t seed) {
    if (speakers < 2) throw std::invalid_argument("corpus needs >= 2 speakers");
    if (utts_per_speaker < 2) throw std::invalid_argument("corpus needs >= 2 utterances per speaker");
    if (duration_s <= 0.0) throw std::invalid_argument("corpus needs a positive duration");

    const Index samples = static_cast<Index>(std::llround(duration_s * kSampleRate));
    Rng base(seed);
    const std::vector<double> grid = fundamental_grid(speakers, base);

    SyntheticCorpus corpus;
    corpus.speakers = speakers;
    corpus.utterances_per_speaker = utts_per_speaker;
    corpus.seed = seed;

    for (Index si = 0; si < speakers; ++si) {
        const std::string speaker_id = "s" + zero_pad(si, 4);
        const SpeakerVoice voice = make_voice(base.fork("speaker/" + speaker_id), grid[si]);
        const std::filesystem::path speaker_dir = out_dir / "wav" / speaker_id;
        std::filesystem::create_directories(speaker_dir);
        for (Index ui = 0; ui < utts_per_speaker; ++ui) {
            const std::string utt_id = speaker_id + "_u" + zero_pad(ui, 3);
            const std::vector<double> s =
                synthesize_utterance(voice, samples, base.fork("utterance/" + utt_id));
            const std::string rel = "wav/" + speaker_id + "/" + utt_id + ".wav";
            write_wav_f32(out_dir / rel, s);
            corpus.manifest.push_back({utt_id, speaker_id, rel});
        }
    }
    return corpus;
}

void write_corpus_manifest(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
    std::ofstream f(dir / "manifest.tsv");
    if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (const ManifestRow& row : corpus.manifest) {
        f << row.utterance_id << "\t" << row.speaker_id << "\t" << row.path << "\n";
    }
}

TrialList parse_trials(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open trial list: " + path.string());
    TrialList out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string label, a, b, extra;
        if (!(ss >> label >> a >> b) || (ss >> extra)) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": expected '<0|1> <id_a> <id_b>'");
        }
        if (label != "0" && label != "1") {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": label must be 0 or 1, got '" + label + "'");
        }
        if (a == b) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": trial pairs an utterance with itself ('" + a + "')");
        }
        out.trials.push_back({label == "1" ? TrialLabel::same : TrialLabel::different, a, b});
    }
    return out;
}

void write_trials(const TrialList& trials, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write trial list: " + path.string());
    for (const Trial& t : trials.trials) {
        f << (t.label == TrialLabel::same ? 1 : 0) << " " << t.id_a << " " << t.id_b << "\n";
    }
}

TrialList sample_trials(const SyntheticCorpus& corpus, Index same_pairs, Index diff_pairs,
                        Rng& rng) {
    std::map<std::string, std::vector<std::string>> by_speaker;
    for (const ManifestRow& row : corpus.manifest) {
        by_speaker[row.speaker_id].push_back(row.utterance_id);
    }
    std::vector<std::string> speakers;
    for (const auto& [sp, utts] : by_speaker) speakers.push_back(sp);
    if (speakers.size() < 2) throw std::invalid_argument("sample_trials: need >= 2 speakers");

    TrialList out;
    std::set<std::pair<std::string, std::string>> seen;
    auto key = [](const std::string& a, const std::string& b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    };

    const Index max_attempts = 200 * (same_pairs + diff_pairs) + 1000;
    Index attempts = 0;
    Index have_same = 0, have_diff = 0;
    while ((have_same < same_pairs || have_diff < diff_pairs) && attempts < max_attempts) {
        ++attempts;
        const bool want_same = have_same < same_pairs &&
                               (have_diff >= diff_pairs || rng.bernoulli(0.5));
        if (want_same) {
            const auto& sp = speakers[rng.below(speakers.size())];
            const auto& utts = by_speaker[sp];
            if (utts.size() < 2) continue;
            const Index i = rng.below(utts.size());
            Index j = rng.below(utts.size() - 1);
            if (j >= i) ++j;
            if (!seen.insert(key(utts[i], utts[j])).second) continue;
            out.trials.push_back({TrialLabel::same, utts[i], utts[j]});
            ++have_same;
        } else {
            const Index si = rng.below(speakers.size());
            Index sj = rng.below(speakers.size() - 1);
            if (sj >= si) ++sj;
            const auto& ua = by_speaker[speakers[si]];
            const auto& ub = by_speaker[speakers[sj]];
            const std::string& a = ua[rng.below(ua.size())];
            const std::string& b = ub[rng.below(ub.size())];
            if (!seen.insert(key(a, b)).second) continue;
            out.trials.push_back({TrialLabel::different, a, b});
            ++have_diff;
        }
    }
    if (have_same < same_pairs || have_diff < diff_pairs) {
        throw std::runtime_error("sample_trials: corpus too small for " +
                                 std::to_string(same_pairs) + "+" + std::to_string(diff_pairs) +
                                 " unique trials");
    }
    return out;
}

CorpusView CorpusView::load(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.tsv");
    if (!f) throw std::runtime_error("no corpus manifest at " + (dir / "manifest.tsv").string());
    std::vector<ManifestRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestRow row;
        if (!std::getline(ss, row.utterance_id, '\t') || !std::getline(ss, row.speaker_id, '\t') ||
            !std::getline(ss, row.path)) {
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     ": expected '<utt>\\t<speaker>\\t<path>'");
        }
        rows.push_back(std::move(row));
    }
    return from_manifest(dir, std::move(rows));
}

CorpusView CorpusView::from_manifest(std::filesystem::path root, std::vector<ManifestRow> rows) {
    CorpusView v;
    v.root_ = std::move(root);
    v.rows_ = std::move(rows);
    for (Index i = 0; i < v.rows_.size(); ++i) {
        const ManifestRow& row = v.rows_[i];
        if (!v.by_utterance_.emplace(row.utterance_id, i).second) {
            throw std::runtime_error("duplicate utterance id in manifest: " + row.utterance_id);
        }
        v.by_speaker_[row.speaker_id].push_back(i);
    }
    for (const auto& [sp, idx] : v.by_speaker_) {
        v.speaker_index_.emplace(sp, v.speakers_.size());
        v.speakers_.push_back(sp);
    }
    return v;
}

const std::vector<Index>& CorpusView::utterances_of(const std::string& speaker) const {
    auto it = by_speaker_.find(speaker);
    if (it == by_speaker_.end()) throw std::out_of_range("unknown speaker: " + speaker);
    return it->second;
}

bool CorpusView::has_utterance(const std::string& utterance_id) const {
    return by_utterance_.count(utterance_id) > 0;
}

const ManifestRow& CorpusView::row_of(const std::string& utterance_id) const {
    auto it = by_utterance_.find(utterance_id);
    if (it == by_utterance_.end()) {
        throw std::out_of_range("utterance not in corpus: " + utterance_id);
    }
    return rows_[it->second];
}

const Waveform& CorpusView::waveform(const std::string& utterance_id) const {
    const ManifestRow& row = row_of(utterance_id);
    std::lock_guard lock(*cache_mu_);
    auto it = cache_.find(utterance_id);
    if (it == cache_.end()) {
        Waveform w = load_wav(root_ / row.path);
        w.speaker_id = row.speaker_id;
        w.utterance_id = row.utterance_id;
        it = cache_.emplace(utterance_id, std::move(w)).first;
    }
    return it->second;
}

Index CorpusView::speaker_index(const std::string& speaker_id) const {
    auto it = speaker_index_.find(speaker_id);
    if (it == speaker_index_.end()) throw std::out_of_range("unknown speaker: " + speaker_id);
    return it->second;
}

}  // namespace spkvec
