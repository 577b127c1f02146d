#include "modality/rmlp.hpp"

#include <cmath>
#include <sstream>

#include "modality/dataio.hpp"
#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::rmlp {

namespace {

constexpr std::size_t H = kHidden;

struct View {
    std::size_t n;
    const double* w1;
    const double* b1;
    const double* w2;
    const double* b2;
    const double* w3;
    double b3;

    View(const MlpParams& p)
        : n(p.inputs),
          w1(p.theta.data()),
          b1(w1 + H * n),
          w2(b1 + H),
          b2(w2 + H * H),
          w3(b2 + H),
          b3(w3[H]) {}
};

void check_input(const MlpParams& p, std::span<const double> x) {
    if (x.size() != p.inputs)
        throw UsageError("mlp: input has " + std::to_string(x.size()) + " values, expected " +
                         std::to_string(p.inputs));
}

}  // namespace

MlpParams zero_mlp(std::size_t inputs) {
    if (inputs == 0) throw UsageError("mlp needs at least one input");
    return {inputs, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(MlpParams::count(inputs)))};
}

MlpParams init_mlp(std::size_t inputs, std::uint64_t seed) {
    MlpParams p = zero_mlp(inputs);
    Rng rng(derive_seed(seed, {0x3197}));
    double* t = p.theta.data();
    auto fill = [&](std::size_t count, std::size_t fan_in) {
        const double a = 0.5 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) *t++ = uniform(rng, -a, a);
    };
    fill(H * inputs, inputs);
    t += H;
    fill(H * H, H);
    t += H;
    fill(H, H);
    return p;
}

double mlp_forward(const MlpParams& p, std::span<const double> x) {
    check_input(p, x);
    const View v(p);
    double h1[H], h2[H];
    for (std::size_t i = 0; i < H; ++i) {
        double a = v.b1[i];
        for (std::size_t j = 0; j < v.n; ++j) a += v.w1[i * v.n + j] * x[j];
        h1[i] = std::tanh(a);
    }
    for (std::size_t i = 0; i < H; ++i) {
        double a = v.b2[i];
        for (std::size_t j = 0; j < H; ++j) a += v.w2[i * H + j] * h1[j];
        h2[i] = std::tanh(a);
    }
    double y = v.b3;
    for (std::size_t i = 0; i < H; ++i) y += v.w3[i] * h2[i];
    return y;
}

Eigen::VectorXd mlp_gradient(const MlpParams& p, std::span<const double> x) {
    check_input(p, x);
    const View v(p);
    double h1[H], h2[H], d2[H], d1[H];
    for (std::size_t i = 0; i < H; ++i) {
        double a = v.b1[i];
        for (std::size_t j = 0; j < v.n; ++j) a += v.w1[i * v.n + j] * x[j];
        h1[i] = std::tanh(a);
    }
    for (std::size_t i = 0; i < H; ++i) {
        double a = v.b2[i];
        for (std::size_t j = 0; j < H; ++j) a += v.w2[i * H + j] * h1[j];
        h2[i] = std::tanh(a);
    }
    for (std::size_t i = 0; i < H; ++i) d2[i] = v.w3[i] * (1.0 - h2[i] * h2[i]);
    for (std::size_t j = 0; j < H; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < H; ++i) s += v.w2[i * H + j] * d2[i];
        d1[j] = s * (1.0 - h1[j] * h1[j]);
    }
    Eigen::VectorXd g(p.theta.size());
    double* o = g.data();
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < v.n; ++j) *o++ = d1[i] * x[j];
    for (std::size_t i = 0; i < H; ++i) *o++ = d1[i];
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < H; ++j) *o++ = d2[i] * h1[j];
    for (std::size_t i = 0; i < H; ++i) *o++ = d2[i];
    for (std::size_t i = 0; i < H; ++i) *o++ = h2[i];
    *o = 1.0;
    return g;
}

std::vector<double> MinMaxScaler::apply(std::span<const double> x) const {
    if (x.size() != min.size()) throw UsageError("scaler: feature count mismatch");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = degenerate[i] ? 0.0 : 2.0 * (x[i] - min[i]) / (max[i] - min[i]) - 1.0;
    return out;
}

MinMaxScaler fit_scaler(const std::vector<std::vector<double>>& X) {
    if (X.empty()) throw UsageError("scaler: no training features");
    MinMaxScaler s;
    s.min = X.front();
    s.max = X.front();
    for (const auto& row : X) {
        if (row.size() != s.min.size()) throw UsageError("scaler: ragged feature rows");
        for (std::size_t i = 0; i < row.size(); ++i) {
            s.min[i] = std::min(s.min[i], row[i]);
            s.max[i] = std::max(s.max[i], row[i]);
        }
    }
    s.degenerate.resize(s.min.size());
    for (std::size_t i = 0; i < s.min.size(); ++i) s.degenerate[i] = !(s.max[i] > s.min[i]);
    return s;
}

double sum_squared_error(const MlpParams& p, const std::vector<std::vector<double>>& X, std::span<const double> y) {
    double sse = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double r = y[i] - mlp_forward(p, X[i]);
        sse += r * r;
    }
    return sse;
}

MlpParams lm_train_from(MlpParams p, const std::vector<std::vector<double>>& X, std::span<const double> y,
                        const LmOptions& options, LmTrace* trace) {
    if (X.size() < 2 || X.size() != y.size()) throw UsageError("lm_train: need at least two samples with targets");
    if (!(options.lambda0 > 0.0)) throw UsageError("lm_train: damping must be positive");
    const auto P = p.theta.size();
    const auto N = static_cast<Eigen::Index>(X.size());
    double lambda = options.lambda0;
    double sse = sum_squared_error(p, X, y);
    if (trace) {
        trace->sse = {sse};
        trace->rejected = 0;
    }
    Eigen::MatrixXd J(N, P);
    Eigen::VectorXd r(N);
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        for (Eigen::Index i = 0; i < N; ++i) {
            const auto& xi = X[static_cast<std::size_t>(i)];
            J.row(i) = mlp_gradient(p, xi).transpose();
            r[i] = y[static_cast<std::size_t>(i)] - mlp_forward(p, xi);
        }
        const Eigen::MatrixXd JtJ = J.transpose() * J;
        const Eigen::VectorXd Jtr = J.transpose() * r;
        for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
            Eigen::MatrixXd A = JtJ;
            A.diagonal().array() += lambda;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
            const Eigen::VectorXd delta = ldlt.solve(Jtr);
            if (ldlt.info() != Eigen::Success || !delta.allFinite()) {
                std::ostringstream os;
                os << "lm_train: singular normal equations at lambda " << lambda << " (epoch " << epoch << ", sse "
                   << sse << ")";
                throw NumericalError(os.str());
            }
            MlpParams trial{p.inputs, p.theta + delta};
            const double trial_sse = sum_squared_error(trial, X, y);
            if (trial_sse < sse) {
                p = std::move(trial);
                sse = trial_sse;
                lambda *= options.decrease;
                if (trace) trace->sse.push_back(sse);
                break;
            }
            lambda *= options.increase;
            if (trace) ++trace->rejected;
        }
    }
    if (trace) trace->final_lambda = lambda;
    return p;
}

MlpParams lm_train(const std::vector<std::vector<double>>& X, std::span<const double> y, std::uint64_t seed,
                   const LmOptions& options, LmTrace* trace) {
    if (X.empty()) throw UsageError("lm_train: no samples");
    return lm_train_from(init_mlp(X.front().size(), seed), X, y, options, trace);
}

double ensemble_predict(std::span<const MlpParams> models, const MinMaxScaler& scaler, std::span<const double> x) {
    if (models.empty()) throw UsageError("ensemble_predict: no models");
    const auto xs = scaler.apply(x);
    double s = 0.0;
    for (const auto& m : models) s += mlp_forward(m, xs);
    return s / static_cast<double>(models.size());
}

void save_ensemble(const std::filesystem::path& path, std::span<const MlpParams> models, const MinMaxScaler& scaler) {
    std::vector<dataio::NamedArray> arrays;
    const std::uint64_t n = scaler.min.size();
    arrays.push_back({"scaler.min", {n}, scaler.min});
    arrays.push_back({"scaler.max", {n}, scaler.max});
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto& t = models[i].theta;
        arrays.push_back({"mlp" + std::to_string(i), {static_cast<std::uint64_t>(t.size())},
                          std::vector<double>(t.data(), t.data() + t.size())});
    }
    dataio::write_parameters(path, arrays);
}

std::vector<MlpParams> load_ensemble(const std::filesystem::path& path, MinMaxScaler& scaler) {
    const auto arrays = dataio::read_parameters(path);
    scaler.min = dataio::find_array(arrays, "scaler.min").values;
    scaler.max = dataio::find_array(arrays, "scaler.max").values;
    if (scaler.min.size() != scaler.max.size()) throw DataError("scaler bounds differ in length");
    scaler.degenerate.resize(scaler.min.size());
    for (std::size_t i = 0; i < scaler.min.size(); ++i) scaler.degenerate[i] = !(scaler.max[i] > scaler.min[i]);
    std::vector<MlpParams> models;
    for (const auto& a : arrays) {
        if (a.name.rfind("mlp", 0) != 0) continue;
        if (scaler.min.empty() || a.values.size() != MlpParams::count(scaler.min.size()))
            throw DataError("malformed perceptron '" + a.name + "'");
        MlpParams p = zero_mlp(scaler.min.size());
        for (std::size_t i = 0; i < a.values.size(); ++i) p.theta[static_cast<Eigen::Index>(i)] = a.values[i];
        models.push_back(std::move(p));
    }
    return models;
}

}  // namespace modality::rmlp
