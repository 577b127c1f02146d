#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace modality::rmlp {

inline constexpr std::size_t kHidden = 8;

/// in -> 8 (tanh) -> 8 (tanh) -> 1 (linear). Flat layout:
/// W1 (8 x in, row-major), b1, W2 (8 x 8), b2, w3 (8), b3.
struct MlpParams {
    std::size_t inputs = 0;
    Eigen::VectorXd theta;

    static std::size_t count(std::size_t inputs) { return kHidden * inputs + kHidden + kHidden * kHidden + kHidden + kHidden + 1; }
};

MlpParams zero_mlp(std::size_t inputs);
/// Weights uniform in +-0.5/sqrt(fan_in), biases zero.
MlpParams init_mlp(std::size_t inputs, std::uint64_t seed);

double mlp_forward(const MlpParams& p, std::span<const double> x);

/// d output / d theta for one sample.
Eigen::VectorXd mlp_gradient(const MlpParams& p, std::span<const double> x);

struct MinMaxScaler {
    std::vector<double> min, max;
    std::vector<bool> degenerate;  // max == min: feature maps to 0

    std::vector<double> apply(std::span<const double> x) const;
};

/// Rows of `X` are samples.
MinMaxScaler fit_scaler(const std::vector<std::vector<double>>& X);

struct LmOptions {
    std::size_t epochs = 5;
    double lambda0 = 1e-3;
    double increase = 10.0;
    double decrease = 0.1;
    std::size_t max_retries = 10;
};

struct LmTrace {
    std::vector<double> sse;  // initial SSE, then the SSE after each accepted step
    std::size_t rejected = 0;
    double final_lambda = 0.0;
};

/// Levenberg-Marquardt on the full batch: each epoch takes one accepted
/// damped Gauss-Newton step, retrying with larger damping when a step does
/// not lower the sum of squared errors.
MlpParams lm_train(const std::vector<std::vector<double>>& X, std::span<const double> y, std::uint64_t seed,
                   const LmOptions& options = {}, LmTrace* trace = nullptr);
MlpParams lm_train_from(MlpParams start, const std::vector<std::vector<double>>& X, std::span<const double> y,
                        const LmOptions& options = {}, LmTrace* trace = nullptr);

double sum_squared_error(const MlpParams& p, const std::vector<std::vector<double>>& X, std::span<const double> y);

/// Mean member output on the scaled input.
double ensemble_predict(std::span<const MlpParams> models, const MinMaxScaler& scaler, std::span<const double> x);

void save_ensemble(const std::filesystem::path& path, std::span<const MlpParams> models, const MinMaxScaler& scaler);
std::vector<MlpParams> load_ensemble(const std::filesystem::path& path, MinMaxScaler& scaler);

}  // namespace modality::rmlp
