#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "spkvec/rng.hpp"
#include "spkvec/tensor.hpp"

namespace spkvec {

constexpr Index kSampleRate = 16000;

struct Waveform {
    std::vector<double> samples;
    Index sample_rate = kSampleRate;
    std::string speaker_id;  // empty when unknown
    std::string utterance_id;
};

// A batch of fixed-rate crops. valid_lengths tracks the pre-padding sample
// count per item; everything past it is zero fill.
struct WaveBatch {
    Tensor data;  // batch x samples
    std::vector<Index> valid_lengths;
    std::vector<std::string> speaker_ids;

    Index batch() const { return data.rank() ? data.dim(0) : 0; }
    Index samples() const { return data.rank() > 1 ? data.dim(1) : 0; }
};

struct ManifestRow {
    std::string utterance_id;
    std::string speaker_id;
    std::string path;  // relative to the corpus root
};

struct SyntheticCorpus {
    Index speakers = 0;
    Index utterances_per_speaker = 0;
    std::uint64_t seed = 0;
    std::vector<ManifestRow> manifest;
};

enum class TrialLabel { different = 0, same = 1 };

struct Trial {
    TrialLabel label;
    std::string id_a;
    std::string id_b;
};

struct TrialList {
    std::vector<Trial> trials;
};

// --- WAV container (RIFF, mono, 16 kHz, PCM16 or float32) ------------------

Waveform load_wav(const std::filesystem::path& path);
void write_wav_f32(const std::filesystem::path& path, const std::vector<double>& samples);
void write_wav_pcm16(const std::filesystem::path& path, const std::vector<double>& samples);

// --- Preprocessing ----------------------------------------------------------

// Zero mean, unit population variance. Constant input maps to all zeros.
Waveform normalize(const Waveform& w);

// Uniform random offset; inputs shorter than crop_samples are zero-padded at
// the tail. Output length is always min-independent: exactly crop_samples
// when padding applies, otherwise crop_samples <= input length.
Waveform random_crop(const Waveform& w, Index crop_samples, Rng& rng);

// Assembles waveforms into a batch matrix, zero-padding to the longest item;
// valid_lengths records each item's true sample count.
WaveBatch make_wave_batch(const std::vector<Waveform>& items);

// --- Synthetic corpus -------------------------------------------------------

// Writes wav/<speaker>/<utterance>.wav files plus manifest rows. Each speaker
// is a fixed mixture of 4 harmonics (speaker-specific fundamental and
// formant-like amplitude profile); utterances vary phase, amplitude jitter
// and additive noise at ~20 dB SNR. Bit-identical per seed.
SyntheticCorpus generate_synthetic_corpus(const std::filesystem::path& out_dir, Index speakers,
                                          Index utts_per_speaker, double duration_s,
                                          std::uint64_t seed);

void write_corpus_manifest(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

// --- Trial lists -------------------------------------------------------------

// One trial per line: "<0|1> <id_a> <id_b>". Rejects malformed lines and
// self-pairs with the offending line number.
TrialList parse_trials(const std::filesystem::path& path);
void write_trials(const TrialList& trials, const std::filesystem::path& path);

// Balanced sampling without replacement over within- and cross-speaker pairs.
TrialList sample_trials(const SyntheticCorpus& corpus, Index same_pairs, Index diff_pairs,
                        Rng& rng);

// --- Loaded corpus ----------------------------------------------------------

// Manifest-backed view with an in-memory waveform cache (single-writer
// insertion, concurrent reads of already-cached entries).
class CorpusView {
public:
    CorpusView() = default;
    static CorpusView load(const std::filesystem::path& dir);
    static CorpusView from_manifest(std::filesystem::path root, std::vector<ManifestRow> rows);

    const std::vector<ManifestRow>& rows() const { return rows_; }
    const std::vector<std::string>& speakers() const { return speakers_; }
    const std::vector<Index>& utterances_of(const std::string& speaker) const;
    bool has_utterance(const std::string& utterance_id) const;
    const ManifestRow& row_of(const std::string& utterance_id) const;
    // Loads (and caches) the waveform for an utterance id.
    const Waveform& waveform(const std::string& utterance_id) const;
    Index speaker_index(const std::string& speaker_id) const;

private:
    std::filesystem::path root_;
    std::vector<ManifestRow> rows_;
    std::map<std::string, Index> by_utterance_;
    std::vector<std::string> speakers_;
    std::map<std::string, Index> speaker_index_;
    std::map<std::string, std::vector<Index>> by_speaker_;
    mutable std::map<std::string, Waveform> cache_;
    // unique_ptr keeps the view movable despite the mutex
    mutable std::unique_ptr<std::mutex> cache_mu_ = std::make_unique<std::mutex>();
};

}  // namespace spkvec
