#include "doctest.h"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "modality/error.hpp"
#include "modality/feats.hpp"
#include "modality/random.hpp"

using namespace modality;
using namespace modality::feats;
using dataio::LogFreqSpectrogram;
using dataio::Pitchogram;

namespace {

// y_k = sum_n c_n x_n cos(pi n (2k+1) / 2N), c_0 = sqrt(1/N), c_n = sqrt(2/N).
std::vector<double> naive_dct3(const std::vector<double>& x, std::size_t K) {
    const double N = static_cast<double>(x.size());
    std::vector<double> y(K, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t n = 0; n < x.size(); ++n) {
            const double c = n == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
            y[k] += c * x[n] * std::cos(std::numbers::pi * static_cast<double>(n) * (2.0 * k + 1.0) / (2.0 * N));
        }
    return y;
}

// Orthonormal DCT-II, the inverse of the orthonormal DCT-III.
std::vector<double> dct2(const std::vector<double>& y) {
    const double N = static_cast<double>(y.size());
    std::vector<double> x(y.size(), 0.0);
    for (std::size_t n = 0; n < y.size(); ++n) {
        const double c = n == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
        for (std::size_t k = 0; k < y.size(); ++k)
            x[n] += c * y[k] * std::cos(std::numbers::pi * static_cast<double>(n) * (2.0 * k + 1.0) / (2.0 * N));
    }
    return x;
}

LogFreqSpectrogram spectrum(std::size_t bins, std::size_t frames) {
    LogFreqSpectrogram s;
    s.origin_hz = 32.7;
    s.values = dataio::Matrix(bins, frames, 0.0f);
    return s;
}

// Smooth peak of unit height centred at fractional bin c.
void bump(LogFreqSpectrogram& s, std::size_t t, double c) {
    for (std::size_t k = 0; k < s.bins(); ++k) {
        const double d = (static_cast<double>(k) - c) / 2.0;
        s.values(k, t) = static_cast<float>(std::exp(-0.5 * d * d));
    }
}

double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("dct3 of the first unit vector") {
    const std::vector<double> e0{1, 0, 0, 0};
    const auto y = dct3(e0, 4);
    for (double v : y) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
    const auto z = dct3(std::vector<double>(8, 0.0), 6);
    for (double v : z) CHECK(v == 0.0);
    CHECK_THROWS_AS(dct3(e0, 5), UsageError);
}

TEST_CASE("dct3 matches direct summation") {
    Rng rng(1);
    for (std::size_t N : {6u, 16u, 51u, 540u}) {
        std::vector<double> x(N);
        for (auto& v : x) v = uniform(rng, -1.0, 1.0);
        const auto a = dct3(x, 6);
        const auto b = naive_dct3(x, 6);
        for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(a[k] - b[k]) < 1e-9);
    }
}

TEST_CASE("dct3 is orthonormal and linear") {
    Rng rng(2);
    std::vector<double> x(16), z(16);
    for (auto& v : x) v = uniform(rng, -1.0, 1.0);
    for (auto& v : z) v = uniform(rng, -1.0, 1.0);
    const auto y = dct3(x, 16);
    CHECK(std::inner_product(y.begin(), y.end(), y.begin(), 0.0) ==
          doctest::Approx(std::inner_product(x.begin(), x.end(), x.begin(), 0.0)).epsilon(1e-12));
    const auto back = dct2(y);
    for (std::size_t i = 0; i < 16; ++i) CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-9));
    std::vector<double> mix(16);
    for (std::size_t i = 0; i < 16; ++i) mix[i] = 2.0 * x[i] - 3.0 * z[i];
    const auto ym = dct3(mix, 6);
    const auto yz = dct3(z, 6);
    for (std::size_t k = 0; k < 6; ++k) CHECK(ym[k] == doctest::Approx(2.0 * y[k] - 3.0 * yz[k]).epsilon(1e-12));
}

TEST_CASE("microtuning of on-grid energy sits at distance 0") {
    auto p = Pitchogram::zeros(4);
    for (std::size_t t = 0; t < 4; ++t) {
        p.values(3600, t) = 2.0f;  // MIDI 60
        p.values(2300, t) = 1.0f;  // MIDI 47
    }
    const auto prof = microtuning_profile(p);
    REQUIRE(prof.size() == 51);
    CHECK(prof[0] == doctest::Approx(3.0));
    for (std::size_t i = 1; i < prof.size(); ++i) CHECK(prof[i] == 0.0);
    const auto f = microtuning_features(p);
    std::vector<double> e0(51, 0.0);
    e0[0] = 3.0;
    const auto want = naive_dct3(e0, 6);
    for (std::size_t k = 0; k < 6; ++k) CHECK(f[k] == doctest::Approx(want[k]).epsilon(1e-12));
}

TEST_CASE("microtuning folds distances above and below the grid") {
    auto p = Pitchogram::zeros(1);
    p.values(3630, 0) = 1.0f;  // +30 cents
    p.values(3570, 0) = 1.0f;  // -30 cents
    p.values(3450, 0) = 1.0f;  // 50 cents
    const auto prof = microtuning_profile(p);
    CHECK(prof[30] == doctest::Approx(2.0));
    CHECK(prof[50] == doctest::Approx(1.0));
}

TEST_CASE("vibrato sweep spreads mass over distances 0 to 40") {
    auto p = Pitchogram::zeros(200);
    for (std::size_t t = 0; t < 200; ++t) {
        const double cents = 40.0 * std::sin(2.0 * std::numbers::pi * 5.5 * t * 0.0058);
        p.values(static_cast<std::size_t>(std::lround(3600 + cents)), t) = 1.0f;
    }
    const auto prof = microtuning_profile(p);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i <= 40; ++i) nonzero += prof[i] > 0.0;
    CHECK(nonzero >= 35);
    for (std::size_t i = 41; i < prof.size(); ++i) CHECK(prof[i] == 0.0);
}

TEST_CASE("zero pitchogram gives zero tuning features") {
    const auto f = microtuning_features(Pitchogram::zeros(3));
    for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("static spectrum has no flux") {
    auto s = spectrum(540, 20);
    for (std::size_t t = 0; t < 20; ++t) bump(s, t, 200.0);
    const auto f = flux_features(s);
    for (double v : f.vs) CHECK(v == 0.0);
    for (double v : f.ve) CHECK(v == 0.0);
}

TEST_CASE("a seven-semitone step is kept by the vibrato-suppressed flux") {
    auto s = spectrum(540, 20);
    for (std::size_t t = 0; t < 20; ++t) bump(s, t, t < 10 ? 200.0 : 235.0);
    const auto f = flux_spectra(s);
    CHECK(total(f.regular) > 0.0);
    CHECK(total(f.vs) == doctest::Approx(total(f.regular)).epsilon(0.02));
    CHECK(total(f.ve) < 0.02 * total(f.regular));
}

TEST_CASE("a 30 cent vibrato moves flux from the suppressed to the enhanced part") {
    auto s = spectrum(540, 400);
    for (std::size_t t = 0; t < 400; ++t) bump(s, t, 200.0 + 1.5 * std::sin(2.0 * std::numbers::pi * 6.0 * t * 0.0058));
    const auto f = flux_spectra(s);
    CHECK(f.ve[200] > 0.0);
    CHECK(f.vs[200] < 0.005);  // peak height is 1
    CHECK(total(f.vs) < 0.1 * total(f.regular));
    for (std::size_t k = 0; k < 540; ++k) CHECK(f.ve[k] + f.vs[k] == doctest::Approx(f.regular[k]).epsilon(1e-12));
}

TEST_CASE("flux needs two frames") {
    CHECK_THROWS_AS(flux_spectra(spectrum(540, 1)), DataError);
}

TEST_CASE("spectral distribution of constant and random spectra") {
    auto s = spectrum(540, 3);
    for (auto& v : s.values.values) v = 0.25f;
    const auto c = spectral_distribution_features(s);
    const auto want = naive_dct3(std::vector<double>(540, 0.25), 6);
    CHECK(c[0] == doctest::Approx(want[0]).epsilon(1e-12));
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(c[k] - want[k]) < 1e-9);

    Rng rng(3);
    std::vector<double> mean(540, 0.0);
    for (std::size_t k = 0; k < 540; ++k)
        for (std::size_t t = 0; t < 3; ++t) {
            s.values(k, t) = static_cast<float>(uniform(rng, 0.0, 1.0));
            mean[k] += s.values(k, t) / 3.0;
        }
    const auto r = spectral_distribution_features(s);
    const auto rw = naive_dct3(mean, 6);
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(r[k] - rw[k]) < 1e-9);

    const auto z = spectral_distribution_features(spectrum(540, 2));
    for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("frame ranges restrict the averaging window") {
    auto s = spectrum(60, 10);
    for (std::size_t t = 5; t < 10; ++t)
        for (std::size_t k = 0; k < 60; ++k) s.values(k, t) = 1.0f;
    const auto head = spectral_distribution_features(s, {0, 5});
    for (double v : head) CHECK(v == 0.0);
    const auto tail = spectral_distribution_features(s, {5});
    CHECK(tail[0] > 0.0);
}

TEST_CASE("feature masks and lengths") {
    CHECK(feature_count(kAllGroups) == 25);
    CHECK(feature_count(SD) == 7);
    CHECK(feature_count(0) == 1);
    CHECK(parse_mask("all") == kAllGroups);
    CHECK(parse_mask("cnn") == 0u);
    CHECK(parse_mask("pt+sd") == (PT | SD));
    CHECK(parse_mask("cnn+ve") == VE);
    CHECK_THROWS_AS(parse_mask("pt+xx"), UsageError);
    CHECK(mask_label(PT | VE) == "cnn+pt+ve");
    CHECK(parse_mask(mask_label(VS | SD)) == (VS | SD));

    GlobalFeatures g;
    g.sd = {1, 2, 3, 4, 5, 6};
    const auto v = assemble_features(0.5, g, SD);
    CHECK(v == std::vector<double>{0.5, 1, 2, 3, 4, 5, 6});
    CHECK(assemble_features(0.5, g, kAllGroups).size() == 25);
}

TEST_CASE("a NaN feature names its group") {
    GlobalFeatures g;
    g.pt[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(assemble_features(1.0, g, kAllGroups), "non-finite value in feature group pt", DataError);
    CHECK_NOTHROW(assemble_features(1.0, g, VS | VE | SD));
}

TEST_CASE("feature table header and row agree in width") {
    GlobalFeatures g;
    const auto h = feature_table_header();
    const auto r = feature_table_row("x", 1.0, g);
    CHECK(std::count(h.begin(), h.end(), ',') == 25);
    CHECK(std::count(r.begin(), r.end(), ',') == 25);
}
