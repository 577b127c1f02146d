#include "modality/feats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>

#include "modality/error.hpp"

namespace modality::feats {

namespace {

template <typename M>
std::pair<std::size_t, std::size_t> clamp_range(const M& m, FrameRange r) {
    const std::size_t end = std::min(r.end, m.cols);
    if (r.begin > end) throw UsageError("frame range begins after its end");
    return {r.begin, end};
}

Coefficients first6(std::span<const double> x) {
    Coefficients c{};
    if (x.size() < kCoefficients) throw DataError("need at least 6 values for the DCT summary");
    const auto y = dct3(x, kCoefficients);
    std::copy(y.begin(), y.end(), c.begin());
    return c;
}

}  // namespace

std::vector<double> dct3(std::span<const double> x, std::size_t K) {
    const std::size_t N = x.size();
    if (K == 0 || K > N) throw UsageError("dct3: need 1 <= K <= N");
    const double a0 = std::sqrt(1.0 / static_cast<double>(N));
    const double a = std::sqrt(2.0 / static_cast<double>(N));
    std::vector<double> y(K);
    for (std::size_t k = 0; k < K; ++k) {
        const double theta = std::numbers::pi * static_cast<double>(2 * k + 1) / (2.0 * static_cast<double>(N));
        double acc = a0 * x[0];
        for (std::size_t n = 1; n < N; ++n) acc += a * x[n] * std::cos(theta * static_cast<double>(n));
        y[k] = acc;
    }
    return y;
}

std::vector<double> microtuning_profile(const dataio::Pitchogram& tuned, FrameRange range) {
    const auto [b, e] = clamp_range(tuned.values, range);
    std::vector<double> hist(kTuningBins, 0.0);
    if (e == b) return hist;
    const long origin = tuned.origin_cents();
    for (std::size_t r = 0; r < tuned.rows(); ++r) {
        const auto row = tuned.values.row(r);
        double s = 0.0;
        for (std::size_t t = b; t < e; ++t) s += row[t];
        if (s == 0.0) continue;
        long d = (origin + static_cast<long>(r)) % 100;
        if (d < 0) d += 100;
        hist[static_cast<std::size_t>(std::min(d, 100 - d))] += s / static_cast<double>(e - b);
    }
    return hist;
}

Coefficients microtuning_features(const dataio::Pitchogram& tuned, FrameRange range) {
    return first6(microtuning_profile(tuned, range));
}

FluxSpectra flux_spectra(const dataio::LogFreqSpectrogram& s, FrameRange range) {
    const auto [b, e] = clamp_range(s.values, range);
    if (e - b < 2) throw DataError("flux needs at least two frames");
    const std::size_t B = s.bins();
    const auto hw = static_cast<std::size_t>(
        std::lround(kVibratoHalfWidthCents / (1200.0 / static_cast<double>(s.bins_per_octave))));
    FluxSpectra out{std::vector<double>(B, 0.0), std::vector<double>(B, 0.0), std::vector<double>(B, 0.0)};
    std::vector<double> prev(B), prev_max(B), cur(B);
    auto load = [&](std::size_t t, std::vector<double>& dst) {
        for (std::size_t k = 0; k < B; ++k) dst[k] = s.values(k, t);
    };
    auto maxfilt = [&](const std::vector<double>& src, std::vector<double>& dst) {
        for (std::size_t k = 0; k < B; ++k) {
            const std::size_t lo = k >= hw ? k - hw : 0, hi = std::min(B - 1, k + hw);
            dst[k] = *std::max_element(src.begin() + static_cast<std::ptrdiff_t>(lo),
                                       src.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
        }
    };
    load(b, prev);
    maxfilt(prev, prev_max);
    for (std::size_t t = b + 1; t < e; ++t) {
        load(t, cur);
        for (std::size_t k = 0; k < B; ++k) {
            const double reg = std::max(0.0, cur[k] - prev[k]);
            const double vs = std::max(0.0, cur[k] - prev_max[k]);
            out.regular[k] += reg;
            out.vs[k] += vs;
            out.ve[k] += std::max(0.0, reg - vs);
        }
        std::swap(prev, cur);
        maxfilt(prev, prev_max);
    }
    const double n = static_cast<double>(e - b - 1);
    for (std::size_t k = 0; k < B; ++k) {
        out.regular[k] /= n;
        out.vs[k] /= n;
        out.ve[k] /= n;
    }
    return out;
}

FluxFeatures flux_features(const dataio::LogFreqSpectrogram& s, FrameRange range) {
    const auto f = flux_spectra(s, range);
    return {first6(f.vs), first6(f.ve)};
}

Coefficients spectral_distribution_features(const dataio::LogFreqSpectrogram& s, FrameRange range) {
    const auto [b, e] = clamp_range(s.values, range);
    if (e == b) throw DataError("spectral distribution needs at least one frame");
    std::vector<double> mean(s.bins(), 0.0);
    for (std::size_t k = 0; k < s.bins(); ++k) {
        const auto row = s.values.row(k);
        for (std::size_t t = b; t < e; ++t) mean[k] += row[t];
        mean[k] /= static_cast<double>(e - b);
    }
    return first6(mean);
}

unsigned parse_mask(const std::string& text) {
    if (text == "all") return kAllGroups;
    if (text == "none" || text == "cnn") return 0;
    unsigned mask = 0;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        if (part == "pt") mask |= PT;
        else if (part == "vs") mask |= VS;
        else if (part == "ve") mask |= VE;
        else if (part == "sd") mask |= SD;
        else if (part != "cnn") throw UsageError("unknown feature group '" + part + "'");
    }
    return mask;
}

std::string mask_label(unsigned mask) {
    if (mask == kAllGroups) return "all";
    std::string out = "cnn";
    if (mask & PT) out += "+pt";
    if (mask & VS) out += "+vs";
    if (mask & VE) out += "+ve";
    if (mask & SD) out += "+sd";
    return out;
}

std::size_t feature_count(unsigned mask) {
    return 1 + kCoefficients * static_cast<std::size_t>(std::popcount(mask & kAllGroups));
}

std::vector<double> assemble_features(double cnn, const GlobalFeatures& g, unsigned mask) {
    if (!std::isfinite(cnn)) throw DataError("non-finite value in feature group cnn");
    std::vector<double> out{cnn};
    auto add = [&](const Coefficients& c, const char* name) {
        for (double v : c)
            if (!std::isfinite(v)) throw DataError(std::string("non-finite value in feature group ") + name);
        out.insert(out.end(), c.begin(), c.end());
    };
    if (mask & PT) add(g.pt, "pt");
    if (mask & VS) add(g.vs, "vs");
    if (mask & VE) add(g.ve, "ve");
    if (mask & SD) add(g.sd, "sd");
    return out;
}

std::string feature_table_header() {
    std::string h = "id,cnn";
    for (const char* g : {"pt", "vs", "ve", "sd"})
        for (std::size_t i = 1; i <= kCoefficients; ++i) h += "," + std::string(g) + std::to_string(i);
    return h;
}

std::string feature_table_row(const std::string& id, double cnn, const GlobalFeatures& g) {
    std::ostringstream os;
    os.precision(17);
    os << id << ',' << cnn;
    for (const auto* c : {&g.pt, &g.vs, &g.ve, &g.sd})
        for (double v : *c) os << ',' << v;
    return os.str();
}

}  // namespace modality::feats
