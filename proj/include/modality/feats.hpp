#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "modality/dataio.hpp"

namespace modality::feats {

inline constexpr std::size_t kCoefficients = 6;
inline constexpr std::size_t kTuningBins = 51;        // cent distance 0..50
inline constexpr double kVibratoHalfWidthCents = 60.0;

using Coefficients = std::array<double, kCoefficients>;

/// First K coefficients of the orthonormal DCT-III.
std::vector<double> dct3(std::span<const double> x, std::size_t K);

/// Frames [begin, end); end = npos means the last frame.
struct FrameRange {
    std::size_t begin = 0;
    std::size_t end = std::numeric_limits<std::size_t>::max();
};

/// Time-averaged activation mass per cent distance to the nearest semitone.
std::vector<double> microtuning_profile(const dataio::Pitchogram& tuned, FrameRange range = {});
Coefficients microtuning_features(const dataio::Pitchogram& tuned, FrameRange range = {});

struct FluxSpectra {
    std::vector<double> regular, vs, ve;  // time-averaged, one value per bin
};

/// regular = max(0, S[t] - S[t-1]); vs = max(0, S[t] - maxfilt(S[t-1])) with
/// the running maximum over +-60 cents; ve = max(0, regular - vs).
FluxSpectra flux_spectra(const dataio::LogFreqSpectrogram& s, FrameRange range = {});

struct FluxFeatures {
    Coefficients vs{}, ve{};
};

FluxFeatures flux_features(const dataio::LogFreqSpectrogram& s, FrameRange range = {});
Coefficients spectral_distribution_features(const dataio::LogFreqSpectrogram& s, FrameRange range = {});

enum Group : unsigned { PT = 1, VS = 2, VE = 4, SD = 8 };
inline constexpr unsigned kAllGroups = PT | VS | VE | SD;

unsigned parse_mask(const std::string& text);  // "all", "none", or e.g. "pt+sd"
std::string mask_label(unsigned mask);

struct GlobalFeatures {
    Coefficients pt{}, vs{}, ve{}, sd{};
};

/// (cnn, pt, vs, ve, sd) with masked groups left out; throws DataError naming
/// the group holding a NaN.
std::vector<double> assemble_features(double cnn, const GlobalFeatures& g, unsigned mask);
std::size_t feature_count(unsigned mask);

/// `id, cnn, pt1..pt6, vs1..vs6, ve1..ve6, sd1..sd6` header line.
std::string feature_table_header();
std::string feature_table_row(const std::string& id, double cnn, const GlobalFeatures& g);

}  // namespace modality::feats
