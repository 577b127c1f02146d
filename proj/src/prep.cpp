#include "modality/prep.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "modality/error.hpp"

namespace modality::prep {

using dataio::LogFreqSpectrogram;
using dataio::Pitchogram;

int timescale_width(int n) {
    if (n == 0) return 1;
    int p = 1;
    for (int i = 0; i < n; ++i) p *= 3;
    return 10 * p + 1;
}

std::vector<double> hann_window(int width) {
    if (width < 1) throw UsageError("hann_window: width must be >= 1");
    if (width == 1) return {1.0};
    std::vector<double> h(static_cast<std::size_t>(width));
    double sum = 0.0;
    for (int j = 0; j < width; ++j) {
        h[j] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * j / (width - 1)));
        sum += h[j];
    }
    for (auto& v : h) v /= sum;
    return h;
}

// The raw window 0.5 - 0.5 cos(theta j) splits into a box sum and the real
// part of a modulated sum; both come from prefix sums, so the cost does not
// depend on the width.
std::vector<double> hann_smooth(std::span<const double> x, int width, Edge edge) {
    if (width < 1 || width % 2 == 0) throw UsageError("hann_smooth: width must be odd and >= 1");
    const std::size_t n = x.size();
    if (width == 1 || n == 0) return {x.begin(), x.end()};

    const long c = (width - 1) / 2;
    const long period = width - 1;
    const double theta = 2.0 * std::numbers::pi / static_cast<double>(period);

    std::vector<double> box(n + 1, 0.0);
    std::vector<std::complex<double>> mod(n + 1);
    for (std::size_t m = 0; m < n; ++m) {
        const double phase = theta * static_cast<double>(static_cast<long>(m) % period);
        box[m + 1] = box[m] + x[m];
        mod[m + 1] = mod[m] + x[m] * std::complex<double>(std::cos(phase), std::sin(phase));
    }
    // Prefix of the raw window for in-range mass.
    std::vector<double> wmass(static_cast<std::size_t>(width) + 1, 0.0);
    for (long j = 0; j < width; ++j)
        wmass[j + 1] = wmass[j] + 0.5 * (1.0 - std::cos(theta * static_cast<double>(j)));
    const double full_mass = wmass.back();

    std::vector<double> y(n);
    const long last = static_cast<long>(n) - 1;
    for (long t = 0; t <= last; ++t) {
        const long lo = std::max(0L, t - c);
        const long hi = std::min(last, t + c);
        const double b = box[hi + 1] - box[lo];
        const std::complex<double> s = mod[hi + 1] - mod[lo];
        const double shift = theta * static_cast<double>(((t - c) % period + period) % period);
        const double cos_part = (std::complex<double>(std::cos(shift), -std::sin(shift)) * s).real();
        const double raw = 0.5 * b - 0.5 * cos_part;
        double mass = full_mass;
        if (edge == Edge::renormalize) {
            const long j0 = lo - (t - c);
            const long j1 = hi - (t - c);
            mass = wmass[j1 + 1] - wmass[j0];
        }
        y[t] = raw / mass;
    }
    return y;
}

LevelSeries level_series(const LogFreqSpectrogram& spect) {
    if (spect.kind != dataio::SpectrumKind::magnitude)
        throw DataError("active_bounds: requires a magnitude spectrogram");
    const std::size_t frames = spect.frames();
    const std::size_t bins = spect.bins();
    if (bins == 0 || frames == 0) throw DataError("active_bounds: empty spectrogram");
    LevelSeries out;
    out.magnitude.resize(frames);
    out.level_db.resize(frames);
    double mean_m = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
        double ss = 0.0;
        for (std::size_t b = 0; b < bins; ++b) {
            const double v = spect.values(b, t);
            ss += v * v;
        }
        const double m = std::sqrt(ss / static_cast<double>(bins));
        out.magnitude[t] = m;
        // Silent frames sit at -200 dB instead of -inf so the filter stays finite.
        out.level_db[t] = 20.0 * std::log10(std::max(m, 1e-10));
        mean_m += m;
    }
    mean_m /= static_cast<double>(frames);
    if (!(mean_m > 0.0)) throw DataError("silent input");
    out.average_db = 20.0 * std::log10(mean_m);
    out.smoothed_db = hann_smooth(out.level_db, kLevelWindow, Edge::renormalize);
    return out;
}

ActiveBounds active_bounds(const LogFreqSpectrogram& spect) {
    if (spect.frames() < static_cast<std::size_t>(kLevelWindow))
        throw DataError("active_bounds: need at least 61 frames, got " + std::to_string(spect.frames()));
    const auto lv = level_series(spect);
    const double threshold = lv.average_db - kActiveRangeDb;
    const auto& s = lv.smoothed_db;
    ActiveBounds b;
    bool found = false;
    for (std::size_t t = 0; t < s.size(); ++t) {
        if (s[t] >= threshold) {
            if (!found) b.start = t;
            b.end = t;
            found = true;
        }
    }
    if (!found) {
        const auto peak = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
        b.start = b.end = peak;
    }
    return b;
}

namespace {

// Smooths one frame across pitch by scattering each nonzero activation.
void smooth_column(const Pitchogram& p, std::size_t frame, const std::vector<double>& h, std::vector<double>& out) {
    const long rows = static_cast<long>(p.rows());
    const long c = static_cast<long>(h.size() / 2);
    std::fill(out.begin(), out.end(), 0.0);
    for (long r = 0; r < rows; ++r) {
        const double v = p.values(static_cast<std::size_t>(r), frame);
        if (v == 0.0) continue;
        const long lo = std::max(0L, r - c);
        const long hi = std::min(rows - 1, r + c);
        for (long q = lo; q <= hi; ++q) out[q] += v * h[q - r + c];
    }
}

int residue(long cents) { return static_cast<int>(((cents % 100) + 100) % 100); }

TuningEstimate offset_from_histogram(const std::array<double, 100>& v) {
    TuningEstimate est;
    est.histogram = v;
    std::size_t best = 0;
    double total = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) {
        total += v[c];
        if (v[c] > v[best]) best = c;
    }
    if (!(total > 0.0)) {
        est.silent = true;
        est.offset_cents = 0;
        return est;
    }
    est.offset_cents = best <= 50 ? static_cast<int>(best) : static_cast<int>(best) - 100;
    return est;
}

}  // namespace

Pitchogram smooth_pitch(const Pitchogram& p) {
    const auto h = hann_window(kPitchWindow);
    Pitchogram out = p;
    std::vector<double> col(p.rows());
    for (std::size_t t = 0; t < p.frames(); ++t) {
        smooth_column(p, t, h, col);
        for (std::size_t r = 0; r < p.rows(); ++r) out.values(r, t) = static_cast<float>(col[r]);
    }
    return out;
}

TuningEstimate estimate_tuning(const Pitchogram& smoothed) {
    std::array<double, 100> v{};
    const long origin = smoothed.origin_cents();
    for (std::size_t r = 0; r < smoothed.rows(); ++r) {
        const int c = residue(origin + static_cast<long>(r));
        double sum = 0.0;
        for (float a : smoothed.values.row(r)) sum += a;
        v[c] += sum;
    }
    return offset_from_histogram(v);
}

Pitchogram retune(const Pitchogram& p, int offset_cents) {
    if (offset_cents < -50 || offset_cents > 50)
        throw UsageError("retune: |offset| must be <= 50 cents, got " + std::to_string(offset_cents));
    Pitchogram out = p;
    const long rows = static_cast<long>(p.rows());
    for (long r = 0; r < rows; ++r) {
        const long src = r + offset_cents;
        auto dst = out.values.row(static_cast<std::size_t>(r));
        if (src < 0 || src >= rows) {
            std::fill(dst.begin(), dst.end(), 0.0f);
        } else {
            const auto s = p.values.row(static_cast<std::size_t>(src));
            std::copy(s.begin(), s.end(), dst.begin());
        }
    }
    return out;
}

SemitoneMatrix to_semitone_matrix(const Pitchogram& p) {
    dataio::validate(p);
    const auto h = hann_window(kPitchWindow);
    const std::size_t frames = p.frames();
    const long origin = p.origin_cents();
    std::vector<double> col(p.rows());

    // Pass 1: tuning histogram of the smoothed map.
    std::array<double, 100> v{};
    for (std::size_t t = 0; t < frames; ++t) {
        smooth_column(p, t, h, col);
        for (std::size_t r = 0; r < col.size(); ++r) v[residue(origin + static_cast<long>(r))] += col[r];
    }
    const auto est = offset_from_histogram(v);

    // Pass 2: sample the retuned smoothed map at MIDI 26..96.
    SemitoneMatrix s;
    s.frames = frames;
    s.tuning_offset_cents = est.offset_cents;
    s.silent = est.silent;
    s.values.assign(kSemitones * frames, 0.0);
    const long rows = static_cast<long>(p.rows());
    for (std::size_t t = 0; t < frames; ++t) {
        smooth_column(p, t, h, col);
        for (std::size_t k = 0; k < kSemitones; ++k) {
            const long row = (kLowMidi + static_cast<long>(k)) * 100 - origin + est.offset_cents;
            if (row >= 0 && row < rows) s(k, t) = col[static_cast<std::size_t>(row)];
        }
    }
    return s;
}

SemitoneMatrix spectrum_to_semitones(const LogFreqSpectrogram& spect) {
    dataio::validate(spect);
    constexpr double kHalfWidth = dataio::kBinsPerOctave / 12.0;  // one semitone in bins
    SemitoneMatrix s;
    s.frames = spect.frames();
    s.values.assign(kSemitones * s.frames, 0.0);
    const long bins = static_cast<long>(spect.bins());
    for (std::size_t k = 0; k < kSemitones; ++k) {
        const double hz = 440.0 * std::exp2((kLowMidi + static_cast<double>(k) - 69.0) / 12.0);
        const double center = spect.bins_per_octave * std::log2(hz / spect.origin_hz);
        const long lo = std::max(0L, static_cast<long>(std::ceil(center - kHalfWidth)));
        const long hi = std::min(bins - 1, static_cast<long>(std::floor(center + kHalfWidth)));
        std::vector<std::pair<long, double>> weights;
        double wsum = 0.0;
        for (long b = lo; b <= hi; ++b) {
            const double w = 1.0 - std::abs(static_cast<double>(b) - center) / kHalfWidth;
            if (w <= 0.0) continue;
            weights.emplace_back(b, w);
            wsum += w;
        }
        if (weights.empty()) continue;
        for (std::size_t t = 0; t < s.frames; ++t) {
            double acc = 0.0;
            for (const auto& [b, w] : weights) acc += w * spect.values(static_cast<std::size_t>(b), t);
            s(k, t) = acc / wsum;
        }
    }
    return s;
}

ScaleStack timescale_stack(const SemitoneMatrix& s) {
    ScaleStack stack;
    stack.frames = s.frames;
    stack.values.assign(s.frames * kSemitones * kTimeScales, 0.0);
    std::vector<double> row(s.frames);
    for (std::size_t k = 0; k < kSemitones; ++k) {
        std::copy(s.values.begin() + static_cast<std::ptrdiff_t>(k * s.frames),
                  s.values.begin() + static_cast<std::ptrdiff_t>((k + 1) * s.frames), row.begin());
        for (std::size_t slot = 0; slot < kTimeScales; ++slot) {
            const auto y = hann_smooth(row, stack.widths[slot], Edge::renormalize);
            for (std::size_t t = 0; t < s.frames; ++t) stack.values[(t * kSemitones + k) * kTimeScales + slot] = y[t];
        }
    }
    return stack;
}

FrameTensor octave_stack(const ScaleStack& stack, std::size_t frame) {
    if (frame >= stack.frames)
        throw UsageError("octave_stack: frame " + std::to_string(frame) + " out of range (" +
                         std::to_string(stack.frames) + " frames)");
    return octave_stack_column(stack.column(frame));
}

SegmentPlan make_segments(std::size_t frames) {
    if (frames == 0) throw UsageError("make_segments: need at least one frame");
    SegmentPlan plan;
    if (frames < kSegmentLength) {
        plan.starts.fill(0);
        plan.valid_length = frames;
        return plan;
    }
    const double span = static_cast<double>(frames - kSegmentLength);
    for (std::size_t i = 0; i < kSegments; ++i)
        plan.starts[i] = static_cast<std::size_t>(std::llround(static_cast<double>(i) * span / (kSegments - 1)));
    plan.valid_length = kSegmentLength;
    return plan;
}

}  // namespace modality::prep
