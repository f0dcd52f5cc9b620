#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "spkvec/audio.hpp"

static_assert(std::endian::native == std::endian::little, "WAV IO assumes a little-endian host");

namespace spkvec {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;

[[noreturn]] void reject(const std::filesystem::path& path, const std::string& why) {
    throw std::runtime_error(path.string() + ": " + why);
}

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

// Infers (speaker, utterance) ids from the file name. The corpus convention
// is wav/<speaker>/<speaker>_uNNN.wav, so the prefix before the first '_'
// wins; files without one fall back to the parent directory name.
void fill_ids(const std::filesystem::path& path, Waveform& w) {
    w.utterance_id = path.stem().string();
    const auto us = w.utterance_id.find('_');
    if (us != std::string::npos && us > 0) {
        w.speaker_id = w.utterance_id.substr(0, us);
    } else if (path.has_parent_path()) {
        w.speaker_id = path.parent_path().filename().string();
    }
}

void write_riff(const std::filesystem::path& path, const std::vector<double>& samples,
                std::uint16_t format, std::uint16_t bits) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    const std::uint32_t bytes_per_sample = bits / 8;
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size()) * bytes_per_sample;
    const std::uint32_t sr = static_cast<std::uint32_t>(kSampleRate);

    auto w16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    auto w32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };

    f.write("RIFF", 4);
    w32(36 + data_bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    w32(16);
    w16(format);
    w16(1);  // mono
    w32(sr);
    w32(sr * bytes_per_sample);
    w16(static_cast<std::uint16_t>(bytes_per_sample));
    w16(bits);
    f.write("data", 4);
    w32(data_bytes);

    if (format == kFormatFloat) {
        std::vector<float> out(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) out[i] = static_cast<float>(samples[i]);
        f.write(reinterpret_cast<const char*>(out.data()), data_bytes);
    } else {
        std::vector<std::int16_t> out(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
            double v = samples[i] * 32768.0;
            if (v > 32767.0) v = 32767.0;
            if (v < -32768.0) v = -32768.0;
            out[i] = static_cast<std::int16_t>(std::lrint(v));
        }
        f.write(reinterpret_cast<const char*>(out.data()), data_bytes);
    }
    if (!f) throw std::runtime_error("short write: " + path.string());
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) reject(path, "cannot open file");
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
        reject(path, "not a RIFF/WAVE file");
    }

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t data_off = 0, data_len = 0;

    std::size_t off = 12;
    while (off + 8 <= buf.size()) {
        char id[5] = {};
        std::memcpy(id, buf.data() + off, 4);
        const std::uint32_t size = read_le<std::uint32_t>(buf, off + 4);
        const std::size_t body = off + 8;
        if (body + size > buf.size()) reject(path, "truncated chunk '" + std::string(id) + "'");
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (size < 16) reject(path, "fmt chunk too small");
            format = read_le<std::uint16_t>(buf, body);
            channels = read_le<std::uint16_t>(buf, body + 2);
            rate = read_le<std::uint32_t>(buf, body + 4);
            bits = read_le<std::uint16_t>(buf, body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_off = body;
            data_len = size;
        }
        off = body + size + (size % 2);  // chunks are word-aligned
    }
    if (!have_fmt) reject(path, "missing fmt chunk");
    if (data_off == 0) reject(path, "missing data chunk");
    if (channels != 1) {
        reject(path, "unsupported channel count " + std::to_string(channels) + " (expected mono)");
    }
    if (rate != kSampleRate) {
        reject(path, "unsupported sample rate " + std::to_string(rate) + " (expected " +
                         std::to_string(kSampleRate) + ")");
    }
    const bool pcm16 = format == kFormatPcm && bits == 16;
    const bool float32 = format == kFormatFloat && bits == 32;
    if (!pcm16 && !float32) {
        reject(path, "unsupported encoding: format tag " + std::to_string(format) + " with " +
                         std::to_string(bits) + " bits (expected 16-bit PCM or 32-bit float)");
    }

    Waveform w;
    if (pcm16) {
        const std::size_t n = data_len / 2;
        w.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            w.samples[i] = read_le<std::int16_t>(buf, data_off + 2 * i) / 32768.0;
        }
    } else {
        const std::size_t n = data_len / 4;
        w.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            w.samples[i] = read_le<float>(buf, data_off + 4 * i);
        }
    }
    w.sample_rate = kSampleRate;
    fill_ids(path, w);
    return w;
}

void write_wav_f32(const std::filesystem::path& path, const std::vector<double>& samples) {
    write_riff(path, samples, kFormatFloat, 32);
}

void write_wav_pcm16(const std::filesystem::path& path, const std::vector<double>& samples) {
    write_riff(path, samples, kFormatPcm, 16);
}

}  // namespace spkvec
