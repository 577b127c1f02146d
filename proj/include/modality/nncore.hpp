#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "modality/dataio.hpp"

namespace modality::nn {

struct Shape {
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t d = 1;

    std::size_t size() const { return h * w * d; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Row-major (height, width, depth) tensor.
struct Tensor3 {
    Shape shape;
    std::vector<double> values;

    Tensor3() = default;
    explicit Tensor3(Shape s, double fill = 0.0) : shape(s), values(s.size(), fill) {}

    double& operator()(std::size_t i, std::size_t j, std::size_t k) { return values[(i * shape.w + j) * shape.d + k]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return values[(i * shape.w + j) * shape.d + k];
    }
};

/// `count` tensors of one shape, stored back to back.
struct Batch {
    Shape shape;
    std::size_t count = 0;
    std::vector<double> values;

    Batch() = default;
    Batch(Shape s, std::size_t n) : shape(s), count(n), values(s.size() * n, 0.0) {}

    std::span<double> item(std::size_t n) { return {values.data() + n * shape.size(), shape.size()}; }
    std::span<const double> item(std::size_t n) const { return {values.data() + n * shape.size(), shape.size()}; }
};

enum class Mode { train, infer };
enum class Axis { height, width, depth };
enum class PoolMode { max, avg };

// ---------------------------------------------------------------------------
// Valid convolution
// ---------------------------------------------------------------------------

/// Filter geometry. Filter f reads input channels [channel_offset[f], +fd),
/// which covers both ordinary convolution (all offsets 0, fd = depth) and the
/// split-branch layer where filter groups read different channels.
struct ConvGeometry {
    Shape input;
    std::size_t fh = 1, fw = 1, fd = 1;
    std::size_t filters = 1;
    std::size_t sh = 1, sw = 1;
    std::vector<std::size_t> channel_offset;

    Shape output() const;
    std::size_t weight_count() const { return filters * fh * fw * fd; }
    std::size_t param_count() const { return weight_count() + filters; }
    /// Throws UsageError naming the offending axis.
    void check() const;
};

ConvGeometry make_conv(Shape input, std::size_t fh, std::size_t fw, std::size_t filters, std::size_t sh = 1,
                       std::size_t sw = 1);

/// Stand-alone layer with its own weights ([f][i][j][k]) and biases.
struct ConvLayer {
    ConvGeometry geometry;
    std::vector<double> weights;
    std::vector<double> biases;
};

Tensor3 conv_valid(const Tensor3& x, const ConvLayer& layer);

void conv_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y);
/// Accumulates into dw, db; writes dx when non-null.
void conv_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy, double* dx, double* dw,
                   double* db);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNorm {
    std::size_t channels = 0;
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;
    std::size_t updates = 0;

    explicit BatchNorm(std::size_t c = 0)
        : channels(c), gamma(c, 1.0), beta(c, 0.0), running_mean(c, 0.0), running_var(c, 1.0) {}
};

/// Normalizes per depth channel over all items and positions of the batch.
/// Train mode uses batch statistics and updates the running ones; infer mode
/// requires at least one prior update.
Batch batchnorm_apply(const Batch& x, BatchNorm& bn, Mode mode);
Tensor3 batchnorm_apply(const Tensor3& x, BatchNorm& bn, Mode mode);

// ---------------------------------------------------------------------------
// Global pooling over one axis
// ---------------------------------------------------------------------------

struct PoolResult {
    Tensor3 output;
    std::vector<std::size_t> argmax;  // max mode: winning index along the axis per output element
};

PoolResult pool_axis(const Tensor3& x, Axis axis, PoolMode mode);
/// Routes `grad_out` back through a pool computed on a tensor of shape `in`.
Tensor3 pool_backward(Shape in, Axis axis, PoolMode mode, const std::vector<std::size_t>& argmax,
                      const Tensor3& grad_out);

// ---------------------------------------------------------------------------
// Adam with coupled L2 and a per-epoch learning-rate drop
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr0 = 0.01;
    double drop = 0.98;    // multiplicative per epoch
    double beta1 = 0.9;    // gradient decay
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double l2 = 1e-4;
};

struct AdamState {
    AdamConfig config;
    std::vector<double> m, v;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(std::size_t n, AdamConfig c) : config(c), m(n, 0.0), v(n, 0.0) {}

    /// Zero-based epoch index: epoch 0 runs at lr0.
    double learning_rate(std::size_t epoch) const;
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, std::size_t epoch);

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct ProbeEval {
    double loss = 0.0;
    /// Hash of the piecewise-linear regime (ReLU signs, pooling winners).
    std::uint64_t signature = 0;
};

using LossProbe = std::function<ProbeEval(std::span<const double>)>;

struct GradCheckOptions {
    std::size_t probes = 200;
    double step = 1e-4;
    // Denominator floor of the relative error; gradients below it are in
    // effect compared absolutely.
    double floor = 1e-5;
    std::uint64_t seed = 0;
    bool all_parameters = false;   // probe every parameter instead of a random sample
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t probed = 0;
    std::size_t skipped = 0;  // probes whose +/- step crossed a kink
    std::size_t worst_index = 0;
};

/// Central differences vs `analytic`. A probe whose perturbed evaluations
/// change the signature straddles a kink and is replaced by another index.
GradCheckReport grad_check(const LossProbe& loss, std::span<const double> params, std::span<const double> analytic,
                           const GradCheckOptions& options);

double relative_error(double analytic, double numeric, double floor = 1e-5);

// ---------------------------------------------------------------------------
// Sequential network over frame batches
// ---------------------------------------------------------------------------

enum class LayerKind { conv, relu, batchnorm, pool };

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    Shape in, out;
    // conv
    ConvGeometry conv;
    std::size_t weight_offset = 0, bias_offset = 0;
    // batchnorm (gamma/beta live in the arena)
    std::size_t gamma_offset = 0, beta_offset = 0;
    std::vector<double> running_mean, running_var;
    std::size_t bn_updates = 0;
    // pool
    Axis axis = Axis::height;
    PoolMode pool_mode = PoolMode::max;

    std::size_t param_count() const;
};

struct NamedCount {
    std::string name;
    std::size_t count = 0;
};

/// Feed-forward chain of conv / ReLU / batch-norm / pooling layers. All
/// learnable values live in one parameter arena so optimizers, checkpoints
/// and gradient checks see a single flat vector.
class Network {
public:
    explicit Network(Shape input = {});

    Network& conv(const std::string& name, std::size_t fh, std::size_t fw, std::size_t filters, std::size_t sh = 1,
                  std::size_t sw = 1, std::vector<std::size_t> channel_offset = {}, std::size_t fd = 0);
    Network& relu(const std::string& name = "relu");
    Network& batchnorm(const std::string& name);
    Network& pool(const std::string& name, Axis axis, PoolMode mode);

    Shape input_shape() const { return input_; }
    Shape output_shape() const;
    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::vector<LayerSpec>& layers() { return layers_; }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }
    std::span<double> grads() { return grads_; }
    std::span<const double> grads() const { return grads_; }
    void zero_grads();
    std::vector<NamedCount> param_counts() const;

    /// Forward over a batch; caches what backward needs. Returns the output batch.
    const Batch& forward(const Batch& in, Mode mode);
    /// Accumulates parameter gradients for the last forward pass.
    void backward(const Batch& grad_out);

    /// Outputs of every layer from the last forward (index i = after layer i).
    const std::vector<Batch>& activations() const { return acts_; }
    std::uint64_t regime_signature() const;
    bool statistics_ready() const;
    void momentum(double m) { bn_momentum_ = m; }
    double epsilon() const { return bn_epsilon_; }

    /// Learnable parameters plus running statistics, by layer name.
    std::vector<dataio::NamedArray> export_state() const;
    void import_state(const std::vector<dataio::NamedArray>& arrays);

private:
    std::size_t allocate(std::size_t n);

    Shape input_;
    std::vector<LayerSpec> layers_;
    std::vector<double> params_, grads_;
    std::vector<Batch> acts_;  // acts_[0] = input copy, acts_[i+1] = output of layer i
    // per-layer caches
    std::vector<std::vector<double>> bn_xhat_, bn_inv_std_;
    std::vector<std::vector<std::size_t>> pool_argmax_;
    Mode last_mode_ = Mode::infer;
    double bn_momentum_ = 0.1;
    double bn_epsilon_ = 1e-5;
};

}  // namespace modality::nn
