#include "doctest.h"

#include <cmath>

#include "modality/error.hpp"
#include "modality/eval.hpp"
#include "modality/nncore.hpp"
#include "modality/random.hpp"
#include "modality/rmlp.hpp"
#include "support.hpp"

using namespace modality;
using namespace modality::rmlp;

namespace {

// Matrix form of the forward pass, written against the documented layout.
double oracle_forward(const MlpParams& p, const std::vector<double>& x) {
    const auto n = static_cast<Eigen::Index>(p.inputs);
    const auto& t = p.theta;
    Eigen::Index o = 0;
    const Eigen::MatrixXd W1 = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data() + o, 8, n);
    o += 8 * n;
    const Eigen::VectorXd b1 = t.segment(o, 8);
    o += 8;
    const Eigen::MatrixXd W2 =
        Eigen::Map<const Eigen::Matrix<double, 8, 8, Eigen::RowMajor>>(t.data() + o);
    o += 64;
    const Eigen::VectorXd b2 = t.segment(o, 8);
    o += 8;
    const Eigen::VectorXd w3 = t.segment(o, 8);
    o += 8;
    const double b3 = t[o];
    const Eigen::VectorXd xv = Eigen::Map<const Eigen::VectorXd>(x.data(), n);
    const Eigen::VectorXd h1 = (W1 * xv + b1).array().tanh();
    const Eigen::VectorXd h2 = (W2 * h1 + b2).array().tanh();
    return w3.dot(h2) + b3;
}

std::vector<std::vector<double>> random_rows(std::size_t n, std::size_t d, Rng& rng) {
    std::vector<std::vector<double>> X(n, std::vector<double>(d));
    for (auto& row : X)
        for (auto& v : row) v = uniform(rng, -1.0, 1.0);
    return X;
}

MlpParams constant_mlp(std::size_t inputs, double b3) {
    auto p = zero_mlp(inputs);
    p.theta[p.theta.size() - 1] = b3;
    return p;
}

}  // namespace

TEST_CASE("parameter count") {
    CHECK(MlpParams::count(25) == 289);
    CHECK(zero_mlp(25).theta.size() == 289);
    CHECK(MlpParams::count(7) == 8 * 7 + 8 + 64 + 8 + 8 + 1);
}

TEST_CASE("min-max scaling without clipping") {
    const auto s = fit_scaler({{0.0, 3.0}, {10.0, 3.0}, {4.0, 3.0}});
    CHECK(s.apply(std::vector<double>{10.0, 3.0})[0] == doctest::Approx(1.0));
    CHECK(s.apply(std::vector<double>{5.0, 3.0})[0] == doctest::Approx(0.0));
    CHECK(s.apply(std::vector<double>{12.0, 3.0})[0] == doctest::Approx(1.4));
    CHECK(s.apply(std::vector<double>{0.0, 3.0})[0] == doctest::Approx(-1.0));
    CHECK(s.degenerate[1]);
    CHECK(s.apply(std::vector<double>{0.0, 99.0})[1] == 0.0);
    CHECK_THROWS_AS(s.apply(std::vector<double>{1.0}), UsageError);
}

TEST_CASE("forward pass special cases and oracle") {
    CHECK(mlp_forward(zero_mlp(5), std::vector<double>{1, 2, 3, 4, 5}) == 0.0);
    CHECK(mlp_forward(constant_mlp(5, 2.0), std::vector<double>{1, 2, 3, 4, 5}) == 2.0);
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = init_mlp(25, static_cast<std::uint64_t>(trial));
        for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta[i] += uniform(rng, -0.5, 0.5);
        std::vector<double> x(25);
        for (auto& v : x) v = uniform(rng, -1.0, 1.0);
        CHECK(mlp_forward(p, x) == doctest::Approx(oracle_forward(p, x)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(mlp_forward(zero_mlp(3), std::vector<double>{1, 2}), UsageError);
}

TEST_CASE("initialization bounds") {
    const auto p = init_mlp(25, 3);
    for (Eigen::Index i = 0; i < 200; ++i) CHECK(std::abs(p.theta[i]) <= 0.5 / std::sqrt(25.0));
    for (Eigen::Index i = 200; i < 208; ++i) CHECK(p.theta[i] == 0.0);
    CHECK(p.theta[288] == 0.0);
    CHECK(init_mlp(25, 3).theta == p.theta);
}

TEST_CASE("jacobian matches fourth-order finite differences") {
    Rng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        auto p = init_mlp(25, static_cast<std::uint64_t>(trial));
        for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta[i] += uniform(rng, -0.5, 0.5);
        std::vector<double> x(25);
        for (auto& v : x) v = uniform(rng, -1.0, 1.0);
        const auto g = mlp_gradient(p, x);
        const double h = 1e-4;
        for (Eigen::Index i = 0; i < p.theta.size(); ++i) {
            auto q = p;
            auto f = [&](double d) {
                q.theta[i] = p.theta[i] + d;
                return mlp_forward(q, x);
            };
            const double fd = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
            worst = std::max(worst, nn::relative_error(g[i], fd));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("perfect fit is left unchanged") {
    Rng rng(6);
    const auto X = random_rows(30, 4, rng);
    auto p = init_mlp(4, 1);
    std::vector<double> y;
    for (const auto& x : X) y.push_back(mlp_forward(p, x));
    LmTrace trace;
    const auto q = lm_train_from(p, X, y, {}, &trace);
    CHECK(q.theta == p.theta);
    CHECK(trace.sse.size() == 1);
    CHECK(trace.sse[0] == 0.0);
}

TEST_CASE("linear target: accepted steps lower the error") {
    Rng rng(7);
    const auto X = random_rows(40, 1, rng);
    std::vector<double> y;
    for (const auto& x : X) y.push_back(0.5 * x[0]);
    LmTrace trace;
    LmOptions o;
    o.epochs = 20;
    lm_train(X, y, 3, o, &trace);
    REQUIRE(trace.sse.size() >= 2);
    for (std::size_t i = 1; i < trace.sse.size(); ++i) CHECK(trace.sse[i] < trace.sse[i - 1]);
    CHECK(trace.sse.back() < 0.01 * trace.sse.front());
}

TEST_CASE("training is deterministic per seed") {
    Rng rng(8);
    const auto X = random_rows(25, 3, rng);
    std::vector<double> y;
    for (const auto& x : X) y.push_back(std::sin(x[0]) + x[1] * x[2]);
    CHECK(lm_train(X, y, 9).theta == lm_train(X, y, 9).theta);
    CHECK(lm_train(X, y, 9).theta != lm_train(X, y, 10).theta);
}

TEST_CASE("lm rejects bad inputs") {
    CHECK_THROWS_AS(lm_train({}, std::vector<double>{}, 1), UsageError);
    LmOptions o;
    o.lambda0 = 0.0;
    CHECK_THROWS_AS(lm_train({{1.0}, {2.0}}, std::vector<double>{1, 2}, 1, o), UsageError);
}

TEST_CASE("ensemble averages member outputs") {
    const auto s = fit_scaler({{0.0}, {1.0}});
    std::vector<MlpParams> one{constant_mlp(1, 1.0)};
    CHECK(ensemble_predict(one, s, std::vector<double>{0.3}) == 1.0);
    std::vector<MlpParams> two{constant_mlp(1, 1.0), constant_mlp(1, 3.0)};
    CHECK(ensemble_predict(two, s, std::vector<double>{0.3}) == 2.0);
    CHECK_THROWS_AS(ensemble_predict(std::vector<MlpParams>{}, s, std::vector<double>{0.3}), UsageError);
}

TEST_CASE("cnn feature alone drives an identity-like fit") {
    Rng rng(9);
    std::vector<std::vector<double>> X;
    std::vector<double> y, cnn;
    for (int i = 0; i < 60; ++i) {
        const double c = uniform(rng, 1.0, 10.0);
        X.push_back({c});
        cnn.push_back(c);
        y.push_back(c + 0.1 * normal(rng));
    }
    const auto s = fit_scaler(X);
    std::vector<std::vector<double>> Xs;
    for (const auto& x : X) Xs.push_back(s.apply(x));
    std::vector<MlpParams> models;
    for (std::uint64_t j = 0; j < 5; ++j) models.push_back(lm_train(Xs, y, j));
    std::vector<double> out;
    for (const auto& x : X) out.push_back(ensemble_predict(models, s, x));
    CHECK(eval::pearson(out, cnn) > 0.99);
}

TEST_CASE("ensemble file round trip") {
    testsupport::TempDir dir("mlp");
    const auto s = fit_scaler({{0.0, 1.0}, {2.0, 5.0}});
    std::vector<MlpParams> models{init_mlp(2, 1), init_mlp(2, 2)};
    save_ensemble(dir / "e.mlp", models, s);
    MinMaxScaler back;
    const auto loaded = load_ensemble(dir / "e.mlp", back);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[1].theta == models[1].theta);
    CHECK(back.min == s.min);
    CHECK(back.max == s.max);
}
