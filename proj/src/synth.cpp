#include <algorithm>
#include <cmath>
#include <numbers>

#include "modality/dataio.hpp"
#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::dataio {

namespace {

constexpr int kHarmonics = 8;
constexpr int kNoiseRowsPerFrame = 3;
constexpr double kSpectrumFloor = 1e-4;
// Scale degrees (semitones above the key class) used for chord roots.
constexpr int kRootDegrees[] = {0, 2, 4, 5, 7, 9};

struct ActiveNote {
    double cents;      // absolute pitch, MIDI * 100
    double amplitude;
};

// Linear split of `amp` between the two rows/bins around fractional position `pos`.
void deposit(Matrix& m, std::size_t frame, double pos, double amp) {
    if (pos < 0.0) return;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo);
    if (lo < m.rows) m(lo, frame) += static_cast<float>(amp * (1.0 - frac));
    if (frac > 0.0 && lo + 1 < m.rows) m(lo + 1, frame) += static_cast<float>(amp * frac);
}

}  // namespace

void validate(const SynthSpec& s) {
    if (s.key_class < 0 || s.key_class > 11) throw UsageError("synth: key_class must be in 0-11");
    if (!(s.major_fraction >= 0.0 && s.major_fraction <= 1.0))
        throw UsageError("synth: major_fraction must be in [0, 1]");
    if (s.n_chords < 1) throw UsageError("synth: n_chords must be >= 1");
    if (!(s.chord_dur_s > 0.0)) throw UsageError("synth: chord_dur_s must be positive");
    if (!(s.vibrato_cents >= 0.0) || !(s.vibrato_hz >= 0.0)) throw UsageError("synth: vibrato must be >= 0");
    if (s.tuning_offset_cents < -50 || s.tuning_offset_cents > 49)
        throw UsageError("synth: tuning_offset_cents must be in [-50, 49]");
    if (!(s.noise_level >= 0.0)) throw UsageError("synth: noise_level must be >= 0");
    if (!(s.lead_silence_s >= 0.0) || !(s.tail_silence_s >= 0.0))
        throw UsageError("synth: silence durations must be >= 0");
}

SynthExcerpt synth_excerpt(const SynthSpec& spec) {
    validate(spec);
    Rng rng(derive_seed(spec.seed, {0x5e17}));

    const auto chord_frames = static_cast<std::size_t>(std::max(1.0, std::round(spec.chord_dur_s / kFramePeriod)));
    const auto lead = static_cast<std::size_t>(std::round(spec.lead_silence_s / kFramePeriod));
    const auto tail = static_cast<std::size_t>(std::round(spec.tail_silence_s / kFramePeriod));
    const std::size_t n_chords = static_cast<std::size_t>(spec.n_chords);
    const std::size_t frames = lead + n_chords * chord_frames + tail;

    // Chord plan: exactly round(f * n) major chords at seeded positions.
    const auto n_major = static_cast<std::size_t>(std::lround(spec.major_fraction * static_cast<double>(n_chords)));
    std::vector<bool> major(n_chords, false);
    std::fill(major.begin(), major.begin() + static_cast<std::ptrdiff_t>(n_major), true);
    shuffle(major.begin(), major.end(), rng);

    SynthExcerpt ex;
    for (std::size_t c = 0; c < n_chords; ++c) {
        SynthChord chord;
        const int degree = c == 0 ? 0 : kRootDegrees[uniform_index(rng, std::size(kRootDegrees))];
        chord.root = (spec.key_class + degree) % 12;
        chord.major = major[c];
        chord.begin = lead + c * chord_frames;
        chord.end = chord.begin + chord_frames;
        const int third = chord.major ? 4 : 3;
        const int bass = 36 + chord.root;
        const int upper = (uniform(rng, 0.0, 1.0) < 0.5 ? 48 : 60) + chord.root;
        chord.notes = {bass, upper, upper + third, upper + 7};
        if (uniform(rng, 0.0, 1.0) < 0.5) {
            // third octave of the triad
            const int top = upper + 12 <= 84 ? upper + 12 : upper - 12;
            chord.notes.insert(chord.notes.end(), {top, top + third, top + 7});
        }
        ex.chords.push_back(std::move(chord));
    }

    ex.pitchogram = Pitchogram::zeros(frames);
    auto& pm = ex.pitchogram.values;
    const double origin_cents = static_cast<double>(ex.pitchogram.origin_cents());

    auto& mag = ex.magnitude;
    mag.kind = SpectrumKind::magnitude;
    mag.origin_hz = 440.0 * std::exp2((kDefaultPitchOrigin - 69.0) / 12.0);
    mag.values = Matrix(kDefaultSpectrumBins, frames, 0.0f);

    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<ActiveNote> active;
    for (const auto& chord : ex.chords) {
        const std::size_t n_notes = chord.notes.size();
        std::vector<double> amp(n_notes), phase(n_notes);
        for (std::size_t n = 0; n < n_notes; ++n) {
            amp[n] = uniform(rng, 0.6, 1.0);
            phase[n] = uniform(rng, 0.0, two_pi);
        }
        for (std::size_t t = chord.begin; t < chord.end; ++t) {
            active.clear();
            const double time_s = static_cast<double>(t) * kFramePeriod;
            for (std::size_t n = 0; n < n_notes; ++n) {
                if (spec.arpeggiate) {
                    const std::size_t slot = (t - chord.begin) * n_notes / chord_frames;
                    if (slot != n) continue;
                }
                const double vib = spec.vibrato_cents * std::sin(two_pi * spec.vibrato_hz * time_s + phase[n]);
                active.push_back({chord.notes[n] * 100.0 + spec.tuning_offset_cents + vib, amp[n]});
            }
            for (const auto& note : active) {
                deposit(pm, t, note.cents - origin_cents, note.amplitude);
                const double f0 = 440.0 * std::exp2((note.cents / 100.0 - 69.0) / 12.0);
                for (int h = 1; h <= kHarmonics; ++h) {
                    const double bin = kBinsPerOctave * std::log2(h * f0 / mag.origin_hz);
                    deposit(mag.values, t, bin, note.amplitude / h);
                }
            }
            for (int k = 0; k < kNoiseRowsPerFrame; ++k) {
                const auto row = uniform_index(rng, pm.rows);
                pm(row, t) += static_cast<float>(spec.noise_level * uniform(rng, 0.0, 1.0));
            }
            for (std::size_t b = 0; b < mag.bins(); ++b)
                mag.values(b, t) += static_cast<float>(0.01 * spec.noise_level * uniform(rng, 0.0, 1.0));
        }
    }

    // Whitened level spectrogram: dB with the per-frame mean level removed.
    auto& wdb = ex.whitened;
    wdb.kind = SpectrumKind::whitened_db;
    wdb.origin_hz = mag.origin_hz;
    wdb.values = Matrix(mag.bins(), frames, 0.0f);
    for (std::size_t t = 0; t < frames; ++t) {
        double mean = 0.0;
        for (std::size_t b = 0; b < mag.bins(); ++b) mean += 20.0 * std::log10(mag.values(b, t) + kSpectrumFloor);
        mean /= static_cast<double>(mag.bins());
        for (std::size_t b = 0; b < mag.bins(); ++b)
            wdb.values(b, t) = static_cast<float>(20.0 * std::log10(mag.values(b, t) + kSpectrumFloor) - mean);
    }

    ex.record.id = spec.id;
    ex.record.dataset = spec.dataset;
    ex.record.rating = synth_rating(spec);
    return ex;
}

SynthSpec sample_synth_spec(const SynthRanges& r, std::size_t index, std::uint64_t seed) {
    if (r.chords_min < 1 || r.chords_max < r.chords_min) throw UsageError("synth: bad chord count range");
    if (!(r.chord_dur_min_s > 0.0) || r.chord_dur_max_s < r.chord_dur_min_s)
        throw UsageError("synth: bad chord duration range");
    Rng rng(derive_seed(seed, {0x5ec, index}));
    SynthSpec s;
    s.id = r.prefix + std::to_string(index);
    s.key_class = static_cast<int>(uniform_index(rng, 12));
    s.n_chords = r.chords_min + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(r.chords_max - r.chords_min + 1)));
    s.major_fraction = static_cast<double>(uniform_index(rng, static_cast<std::uint64_t>(s.n_chords + 1))) / s.n_chords;
    s.chord_dur_s = uniform(rng, r.chord_dur_min_s, r.chord_dur_max_s);
    s.vibrato_cents = uniform(rng, 0.0, r.vibrato_max_cents);
    s.tuning_offset_cents = static_cast<int>(uniform_index(rng, 100)) - 50;
    s.noise_level = r.noise_level;
    s.lead_silence_s = uniform(rng, 0.0, r.silence_max_s);
    s.tail_silence_s = uniform(rng, 0.0, r.silence_max_s);
    s.arpeggiate = r.arpeggiate;
    s.dataset = r.dataset;
    s.seed = derive_seed(seed, {0x5eed, index});
    return s;
}

ExcerptRecord write_excerpt(const std::filesystem::path& dir, const SynthExcerpt& ex) {
    std::filesystem::create_directories(dir);
    ExcerptRecord r = ex.record;
    r.pitchogram_path = std::filesystem::absolute(dir / (r.id + ".pitch"));
    r.magnitude_path = std::filesystem::absolute(dir / (r.id + ".mag"));
    r.whitened_path = std::filesystem::absolute(dir / (r.id + ".wdb"));
    write_pitchogram(r.pitchogram_path, ex.pitchogram);
    write_spectrogram(r.magnitude_path, ex.magnitude);
    write_spectrogram(r.whitened_path, ex.whitened);
    return r;
}

}  // namespace modality::dataio
