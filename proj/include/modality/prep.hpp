#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "modality/dataio.hpp"

namespace modality::prep {

inline constexpr int kLevelWindow = 61;     // frames (0.35 s)
inline constexpr int kPitchWindow = 141;    // cents
inline constexpr double kActiveRangeDb = 10.0;
inline constexpr int kLowMidi = 26;
inline constexpr int kHighMidi = 96;
inline constexpr std::size_t kSemitones = 71;
inline constexpr std::size_t kTimeScales = 6;
inline constexpr std::size_t kOctaves = 5;
inline constexpr std::size_t kChromaHeight = 23;
inline constexpr std::size_t kFrameValues = kChromaHeight * kTimeScales * kOctaves;  // 690
inline constexpr std::size_t kSegmentLength = 1550;  // 9 s
inline constexpr std::size_t kSegments = 6;

/// Hann width for time scale n >= 1: 10 * 3^n + 1. Slot 0 (n = 0) is unfiltered, width 1.
int timescale_width(int n);
inline const std::array<int, kTimeScales> kTimeScaleWidths = {1, 31, 91, 271, 811, 2431};

/// Symmetric Hann window 0.5(1 - cos(2 pi j / (W - 1))) normalized to unit sum. W = 1 gives {1}.
std::vector<double> hann_window(int width);

enum class Edge {
    zero,         // zero-padded outside the series
    renormalize,  // divide by the window mass overlapping valid samples
};

/// Centered Hann smoothing in O(N) independent of the width.
std::vector<double> hann_smooth(std::span<const double> x, int width, Edge edge);

struct LevelSeries {
    std::vector<double> magnitude;    // m_i, root mean square over bins
    std::vector<double> level_db;     // 20 log10 m_i
    std::vector<double> smoothed_db;  // width-61 Hann
    double average_db = 0.0;          // 20 log10 mean(m)
};

LevelSeries level_series(const dataio::LogFreqSpectrogram& spect);

struct ActiveBounds {
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
};

/// First and last frame whose smoothed level is >= L_a - 10 dB.
ActiveBounds active_bounds(const dataio::LogFreqSpectrogram& spect);

/// Width-141 unit-sum Hann across pitch, zero beyond the stored range.
dataio::Pitchogram smooth_pitch(const dataio::Pitchogram& p);

struct TuningEstimate {
    int offset_cents = 0;   // content lies this many cents above the grid, in [-49, 50]
    bool silent = false;    // all-zero input; offset forced to 0
    std::array<double, 100> histogram{};
};

/// Expects a map already smoothed across pitch.
TuningEstimate estimate_tuning(const dataio::Pitchogram& smoothed);

/// Shifts every frame by -offset rows; vacated rows are zero.
dataio::Pitchogram retune(const dataio::Pitchogram& p, int offset_cents);

struct SemitoneMatrix {
    std::size_t frames = 0;
    int tuning_offset_cents = 0;
    bool silent = false;
    std::vector<double> values;  // kSemitones x frames, row 0 = MIDI 26

    double operator()(std::size_t row, std::size_t frame) const { return values[row * frames + frame]; }
    double& operator()(std::size_t row, std::size_t frame) { return values[row * frames + frame]; }
};

/// Smooth across pitch, estimate global tuning, retune, sample MIDI 26..96.
SemitoneMatrix to_semitone_matrix(const dataio::Pitchogram& p);

/// Spectral ablation input: 71 semitone bands by overlapping triangular
/// filters over the 60-bin/octave spectrogram (weighted mean per band).
/// Whitened-dB input can yield negative values.
SemitoneMatrix spectrum_to_semitones(const dataio::LogFreqSpectrogram& s);

/// Time-scale stack; value layout [frame][row][slot].
struct ScaleStack {
    std::size_t frames = 0;
    std::array<int, kTimeScales> widths = kTimeScaleWidths;
    std::vector<double> values;

    double operator()(std::size_t row, std::size_t frame, std::size_t slot) const {
        return values[(frame * kSemitones + row) * kTimeScales + slot];
    }
    /// The 71 x 6 block of one frame, row-major (row, slot).
    std::span<const double> column(std::size_t frame) const {
        return {values.data() + frame * kSemitones * kTimeScales, kSemitones * kTimeScales};
    }
};

/// Slot 0 unfiltered; slots 1-5 time-smoothed with renormalized edges.
ScaleStack timescale_stack(const SemitoneMatrix& s);

/// One frame's 23 (pitch) x 6 (time scale) x 5 (octave) input; layout [p][t][k].
struct FrameTensor {
    std::array<double, kFrameValues> values{};

    double operator()(std::size_t p, std::size_t t, std::size_t k) const {
        return values[(p * kTimeScales + t) * kOctaves + k];
    }
    double& operator()(std::size_t p, std::size_t t, std::size_t k) { return values[(p * kTimeScales + t) * kOctaves + k]; }
};

/// Entry [p, t, k] = stack[12k + p, frame, t].
FrameTensor octave_stack(const ScaleStack& stack, std::size_t frame);
/// Same indexing law applied to a raw 71 x 6 column (row, slot).
template <typename T>
FrameTensor octave_stack_column(std::span<const T> column) {
    FrameTensor f;
    for (std::size_t p = 0; p < kChromaHeight; ++p)
        for (std::size_t t = 0; t < kTimeScales; ++t)
            for (std::size_t k = 0; k < kOctaves; ++k)
                f(p, t, k) = static_cast<double>(column[(12 * k + p) * kTimeScales + t]);
    return f;
}

struct SegmentPlan {
    std::array<std::size_t, kSegments> starts{};
    std::size_t length = kSegmentLength;
    /// Frames actually present in each segment: min(T, 1550). Shorter
    /// excerpts give one zero-padded segment replicated six times.
    std::size_t valid_length = 0;
};

SegmentPlan make_segments(std::size_t frames);

}  // namespace modality::prep
