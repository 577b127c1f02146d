#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modality/dataio.hpp"

namespace modality::eval {

double pearson(std::span<const double> a, std::span<const double> b);
/// Squared Pearson correlation. Throws NumericalError("undefined correlation")
/// when either side has zero variance.
double r_squared(std::span<const double> pred, std::span<const double> truth);

struct FoldPlan {
    std::size_t k = 10;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> folds;  // validation indices per fold, ascending
    std::vector<std::size_t> fold_of;             // fold index per record

    /// Indices outside fold f, ascending.
    std::vector<std::size_t> training(std::size_t f) const;
    std::uint64_t fingerprint() const;
};

/// Seeded shuffle per stratum, then round-robin assignment. The round-robin
/// cursor carries over between strata so fold totals also stay within one.
FoldPlan stratified_folds(std::span<const dataio::DatasetTag> strata, std::size_t k, std::uint64_t seed);
FoldPlan stratified_folds(std::span<const dataio::ExcerptRecord> records, std::size_t k, std::uint64_t seed);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

struct BootstrapOptions {
    std::size_t resamples = 1'000'000;
    double level = 0.95;
    std::size_t draw_count = 10;  // values per resample; 0 = the number of runs
    std::uint64_t seed = 0;
};

/// Percentile bootstrap of the mean.
Interval bootstrap_ci(std::span<const double> runs, const BootstrapOptions& options);

/// Value at fraction q of the sorted sample (nearest rank, lower).
double percentile(std::vector<double> values, double q);

double cronbach_alpha_std(const dataio::RatingsMatrix& ratings);

struct HumanBaseline {
    double mean_r2 = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

struct HumanBaselineOptions {
    std::size_t resamples = 100'000;
    double level = 0.95;
    std::uint64_t seed = 0;
};

HumanBaseline human_baseline(const dataio::RatingsMatrix& ratings, std::size_t n, const HumanBaselineOptions& options);

/// Per-excerpt mean over the listeners with `use[l]` set; excerpts without
/// any rating from that set come back as NaN.
std::vector<double> mean_rating(const dataio::RatingsMatrix& ratings, const std::vector<bool>& use);

}  // namespace modality::eval
