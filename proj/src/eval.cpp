#include "modality/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::eval {

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw UsageError("correlation: length mismatch");
    if (a.size() < 2) throw UsageError("correlation: need at least two values");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) throw NumericalError("undefined correlation");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double r_squared(std::span<const double> pred, std::span<const double> truth) {
    const double r = pearson(pred, truth);
    return r * r;
}

std::vector<std::size_t> FoldPlan::training(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if (fold_of[i] != f) out.push_back(i);
    return out;
}

std::uint64_t FoldPlan::fingerprint() const {
    std::uint64_t h = splitmix64(k);
    for (auto f : fold_of) h = splitmix64(h ^ f);
    return h;
}

FoldPlan stratified_folds(std::span<const dataio::DatasetTag> strata, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw UsageError("fold count must be positive");
    if (k > strata.size())
        throw UsageError("fold count " + std::to_string(k) + " exceeds record count " + std::to_string(strata.size()));
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.assign(k, {});
    plan.fold_of.assign(strata.size(), 0);

    std::vector<dataio::DatasetTag> tags(strata.begin(), strata.end());
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    std::size_t cursor = 0;
    for (auto tag : tags) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < strata.size(); ++i)
            if (strata[i] == tag) members.push_back(i);
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(tag)}));
        shuffle(members.begin(), members.end(), rng);
        for (auto i : members) {
            plan.fold_of[i] = cursor;
            plan.folds[cursor].push_back(i);
            cursor = (cursor + 1) % k;
        }
    }
    for (auto& f : plan.folds) std::sort(f.begin(), f.end());
    return plan;
}

FoldPlan stratified_folds(std::span<const dataio::ExcerptRecord> records, std::size_t k, std::uint64_t seed) {
    std::vector<dataio::DatasetTag> tags;
    for (const auto& r : records) tags.push_back(r.dataset);
    return stratified_folds(std::span<const dataio::DatasetTag>(tags), k, seed);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw UsageError("percentile of an empty sample");
    const double rank = std::ceil(q * static_cast<double>(values.size()));
    const std::size_t idx = std::min(values.size() - 1, static_cast<std::size_t>(std::max(rank, 1.0)) - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
    return values[idx];
}

Interval bootstrap_ci(std::span<const double> runs, const BootstrapOptions& options) {
    if (runs.size() < 2) throw UsageError("bootstrap needs at least two runs");
    if (options.resamples == 0) throw UsageError("bootstrap needs at least one resample");
    const std::size_t draws = options.draw_count ? options.draw_count : runs.size();
    Rng rng(derive_seed(options.seed, {0xb007}));
    std::vector<double> means(options.resamples);
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t j = 0; j < draws; ++j) s += runs[uniform_index(rng, runs.size())];
        m = s / static_cast<double>(draws);
    }
    const double tail = (1.0 - options.level) / 2.0;
    return {percentile(means, tail), percentile(std::move(means), 1.0 - tail)};
}

namespace {

// Pairwise-complete Pearson between two listeners.
double listener_correlation(const dataio::RatingsMatrix& r, std::size_t a, std::size_t b) {
    std::vector<double> x, y;
    for (std::size_t e = 0; e < r.excerpts; ++e)
        if (r.has(a, e) && r.has(b, e)) {
            x.push_back(r.at(a, e));
            y.push_back(r.at(b, e));
        }
    try {
        return pearson(x, y);
    } catch (const NumericalError&) {
        throw NumericalError("zero-variance listener among " + std::to_string(a) + ", " + std::to_string(b));
    }
}

// R^2 over excerpts where both means exist.
double mean_r2(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::isnan(a[i]) && !std::isnan(b[i])) {
            x.push_back(a[i]);
            y.push_back(b[i]);
        }
    return r_squared(x, y);
}

}  // namespace

double cronbach_alpha_std(const dataio::RatingsMatrix& ratings) {
    const std::size_t K = ratings.listeners;
    if (K < 2) throw UsageError("Cronbach's alpha needs at least two listeners");
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b = a + 1; b < K; ++b) {
            sum += listener_correlation(ratings, a, b);
            ++pairs;
        }
    const double rbar = sum / static_cast<double>(pairs);
    const double k = static_cast<double>(K);
    return k * rbar / (1.0 + (k - 1.0) * rbar);
}

std::vector<double> mean_rating(const dataio::RatingsMatrix& ratings, const std::vector<bool>& use) {
    std::vector<double> out(ratings.excerpts, std::nan(""));
    for (std::size_t e = 0; e < ratings.excerpts; ++e) {
        double s = 0.0, n = 0.0;
        for (std::size_t l = 0; l < ratings.listeners; ++l)
            if (use[l] && ratings.has(l, e)) {
                s += ratings.at(l, e);
                n += 1.0;
            }
        if (n > 0.0) out[e] = s / n;
    }
    return out;
}

HumanBaseline human_baseline(const dataio::RatingsMatrix& ratings, std::size_t n,
                             const HumanBaselineOptions& options) {
    const std::size_t L = ratings.listeners;
    if (L < 3) throw UsageError("human baseline needs at least three listeners");
    if (n == 0 || n >= L) throw UsageError("human baseline: n must lie in [1, listeners)");

    // Identical listeners have no variance across the split; report the exact agreement.
    bool identical = true;
    for (std::size_t l = 1; l < L && identical; ++l)
        for (std::size_t e = 0; e < ratings.excerpts && identical; ++e)
            if (ratings.has(0, e) != ratings.has(l, e) || (ratings.has(0, e) && ratings.at(0, e) != ratings.at(l, e)))
                identical = false;

    auto r2_or_one = [&](const std::vector<double>& a, const std::vector<double>& b) {
        try {
            return mean_r2(a, b);
        } catch (const NumericalError&) {
            if (identical) return 1.0;
            throw;
        }
    };

    HumanBaseline out;
    const double tail = (1.0 - options.level) / 2.0;
    if (n == 1) {
        std::vector<double> scores;
        for (std::size_t l = 0; l < L; ++l) {
            std::vector<bool> self(L, false), others(L, true);
            self[l] = true;
            others[l] = false;
            scores.push_back(r2_or_one(mean_rating(ratings, self), mean_rating(ratings, others)));
        }
        out.mean_r2 = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(L);
        std::sort(scores.begin(), scores.end());
        out.lo = scores[1];
        out.hi = scores[L - 2];
        return out;
    }

    Rng rng(derive_seed(options.seed, {0x4b, n}));
    std::vector<double> scores;
    scores.reserve(options.resamples);
    std::vector<double> sampled_mean(ratings.excerpts);
    while (scores.size() < options.resamples) {
        std::vector<std::size_t> count(L, 0);
        for (std::size_t j = 0; j < n; ++j) ++count[uniform_index(rng, L)];
        std::vector<bool> rest(L);
        bool any_rest = false;
        for (std::size_t l = 0; l < L; ++l) {
            rest[l] = count[l] == 0;
            any_rest = any_rest || rest[l];
        }
        if (!any_rest) continue;
        // Mean over the drawn multiset, so repeated listeners weigh more.
        for (std::size_t e = 0; e < ratings.excerpts; ++e) {
            double s = 0.0, w = 0.0;
            for (std::size_t l = 0; l < L; ++l)
                if (count[l] && ratings.has(l, e)) {
                    s += static_cast<double>(count[l]) * ratings.at(l, e);
                    w += static_cast<double>(count[l]);
                }
            sampled_mean[e] = w > 0.0 ? s / w : std::nan("");
        }
        scores.push_back(r2_or_one(sampled_mean, mean_rating(ratings, rest)));
    }
    out.mean_r2 = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    out.lo = percentile(scores, tail);
    out.hi = percentile(std::move(scores), 1.0 - tail);
    return out;
}

}  // namespace modality::eval
