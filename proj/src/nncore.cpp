#include "modality/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::nn {

std::string to_string(const Shape& s) {
    return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.d);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

Shape ConvGeometry::output() const {
    return {(input.h - fh) / sh + 1, (input.w - fw) / sw + 1, filters};
}

void ConvGeometry::check() const {
    if (fh == 0 || fw == 0 || fd == 0 || filters == 0 || sh == 0 || sw == 0)
        throw UsageError("conv: zero-sized filter, stride or filter count");
    if (fh > input.h || (input.h - fh) % sh != 0)
        throw UsageError("conv: height mismatch (input " + std::to_string(input.h) + ", filter " + std::to_string(fh) +
                         ", stride " + std::to_string(sh) + ")");
    if (fw > input.w || (input.w - fw) % sw != 0)
        throw UsageError("conv: width mismatch (input " + std::to_string(input.w) + ", filter " + std::to_string(fw) +
                         ", stride " + std::to_string(sw) + ")");
    if (channel_offset.size() != filters) throw UsageError("conv: channel offsets must match filter count");
    for (auto off : channel_offset)
        if (off + fd > input.d)
            throw UsageError("conv: depth mismatch (input " + std::to_string(input.d) + ", filter " +
                             std::to_string(fd) + " at offset " + std::to_string(off) + ")");
}

ConvGeometry make_conv(Shape input, std::size_t fh, std::size_t fw, std::size_t filters, std::size_t sh,
                       std::size_t sw) {
    ConvGeometry g;
    g.input = input;
    g.fh = fh;
    g.fw = fw;
    g.fd = input.d;
    g.filters = filters;
    g.sh = sh;
    g.sw = sw;
    g.channel_offset.assign(filters, 0);
    g.check();
    return g;
}

namespace {

// Input offset of every filter tap relative to the window origin, per filter.
const std::vector<std::size_t>& tap_offsets(const ConvGeometry& g) {
    thread_local std::vector<std::size_t> taps;
    const std::size_t W = g.input.w, D = g.input.d;
    const std::size_t per = g.fh * g.fw * g.fd;
    taps.resize(g.filters * per);
    for (std::size_t f = 0; f < g.filters; ++f)
        for (std::size_t i = 0; i < g.fh; ++i)
            for (std::size_t j = 0; j < g.fw; ++j)
                for (std::size_t k = 0; k < g.fd; ++k)
                    taps[f * per + (i * g.fw + j) * g.fd + k] = (i * W + j) * D + g.channel_offset[f] + k;
    return taps;
}

void conv_forward_taps(const ConvGeometry& g, const std::vector<std::size_t>& taps, const double* x, const double* w,
                       const double* b, double* y) {
    const Shape out = g.output();
    const std::size_t W = g.input.w, D = g.input.d;
    const std::size_t per = g.fh * g.fw * g.fd;
    for (std::size_t oi = 0; oi < out.h; ++oi) {
        for (std::size_t oj = 0; oj < out.w; ++oj) {
            const double* xo = x + (oi * g.sh * W + oj * g.sw) * D;
            double* yo = y + (oi * out.w + oj) * out.d;
            for (std::size_t f = 0; f < g.filters; ++f) {
                const double* wf = w + f * per;
                const std::size_t* tf = taps.data() + f * per;
                double acc = b[f];
                for (std::size_t t = 0; t < per; ++t) acc += wf[t] * xo[tf[t]];
                yo[f] = acc;
            }
        }
    }
}

void conv_backward_taps(const ConvGeometry& g, const std::vector<std::size_t>& taps, const double* x, const double* w,
                        const double* dy, double* dx, double* dw, double* db) {
    const Shape out = g.output();
    const std::size_t W = g.input.w, D = g.input.d;
    const std::size_t per = g.fh * g.fw * g.fd;
    if (dx) std::fill(dx, dx + g.input.size(), 0.0);
    for (std::size_t oi = 0; oi < out.h; ++oi) {
        for (std::size_t oj = 0; oj < out.w; ++oj) {
            const std::size_t base = (oi * g.sh * W + oj * g.sw) * D;
            const double* xo = x + base;
            const double* go = dy + (oi * out.w + oj) * out.d;
            for (std::size_t f = 0; f < g.filters; ++f) {
                const double gf = go[f];
                if (gf == 0.0) continue;
                db[f] += gf;
                const std::size_t* tf = taps.data() + f * per;
                double* dwf = dw + f * per;
                for (std::size_t t = 0; t < per; ++t) dwf[t] += gf * xo[tf[t]];
                if (dx) {
                    const double* wf = w + f * per;
                    double* dxo = dx + base;
                    for (std::size_t t = 0; t < per; ++t) dxo[tf[t]] += gf * wf[t];
                }
            }
        }
    }
}

}  // namespace

void conv_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y) {
    conv_forward_taps(g, tap_offsets(g), x, w, b, y);
}

void conv_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy, double* dx, double* dw,
                   double* db) {
    conv_backward_taps(g, tap_offsets(g), x, w, dy, dx, dw, db);
}

Tensor3 conv_valid(const Tensor3& x, const ConvLayer& layer) {
    const auto& g = layer.geometry;
    if (!(x.shape == g.input))
        throw UsageError("conv: input " + to_string(x.shape) + " does not match layer input " + to_string(g.input));
    g.check();
    if (layer.weights.size() != g.weight_count() || layer.biases.size() != g.filters)
        throw UsageError("conv: weight or bias count does not match geometry");
    Tensor3 y(g.output());
    conv_forward(g, x.values.data(), layer.weights.data(), layer.biases.data(), y.values.data());
    return y;
}

// ---------------------------------------------------------------------------
// Batch normalization kernels
// ---------------------------------------------------------------------------

namespace {

struct BnView {
    std::size_t channels;
    double* gamma;
    double* beta;
    std::vector<double>* running_mean;
    std::vector<double>* running_var;
    std::size_t* updates;
    double momentum;
    double epsilon;
};

// x and y hold `n` rows of `channels` values each (positions flattened).
void bn_forward(const BnView& bn, const double* x, std::size_t n, double* y, Mode mode, std::vector<double>* xhat,
                std::vector<double>* inv_std) {
    const std::size_t C = bn.channels;
    if (mode == Mode::infer) {
        if (*bn.updates == 0) throw NumericalError("uninitialized statistics");
        for (std::size_t c = 0; c < C; ++c) {
            const double is = 1.0 / std::sqrt((*bn.running_var)[c] + bn.epsilon);
            const double mu = (*bn.running_mean)[c];
            for (std::size_t r = 0; r < n; ++r) y[r * C + c] = bn.gamma[c] * (x[r * C + c] - mu) * is + bn.beta[c];
        }
        if (inv_std) {
            inv_std->assign(C, 0.0);
            for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt((*bn.running_var)[c] + bn.epsilon);
        }
        return;
    }
    if (n == 0) throw NumericalError("batchnorm: empty batch");
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < C; ++c) mean[c] += x[r * C + c];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            const double d = x[r * C + c] - mean[c];
            var[c] += d * d;
        }
    for (auto& v : var) v /= static_cast<double>(n);
    if (xhat) xhat->resize(n * C);
    if (inv_std) inv_std->resize(C);
    std::vector<double> is(C);
    for (std::size_t c = 0; c < C; ++c) is[c] = 1.0 / std::sqrt(var[c] + bn.epsilon);
    if (inv_std) *inv_std = is;
    double* xh = xhat ? xhat->data() : nullptr;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            const double v = (x[r * C + c] - mean[c]) * is[c];
            if (xh) xh[r * C + c] = v;
            y[r * C + c] = bn.gamma[c] * v + bn.beta[c];
        }
    for (std::size_t c = 0; c < C; ++c) {
        const double unbiased = n > 1 ? var[c] * static_cast<double>(n) / static_cast<double>(n - 1) : var[c];
        (*bn.running_mean)[c] = (1.0 - bn.momentum) * (*bn.running_mean)[c] + bn.momentum * mean[c];
        (*bn.running_var)[c] = (1.0 - bn.momentum) * (*bn.running_var)[c] + bn.momentum * unbiased;
    }
    ++*bn.updates;
}

}  // namespace

Batch batchnorm_apply(const Batch& x, BatchNorm& bn, Mode mode) {
    if (x.shape.d != bn.channels)
        throw UsageError("batchnorm: channel count " + std::to_string(x.shape.d) + " != " + std::to_string(bn.channels));
    Batch y(x.shape, x.count);
    BnView view{bn.channels, bn.gamma.data(), bn.beta.data(), &bn.running_mean, &bn.running_var, &bn.updates,
                bn.momentum, bn.epsilon};
    bn_forward(view, x.values.data(), x.count * x.shape.h * x.shape.w, y.values.data(), mode, nullptr, nullptr);
    return y;
}

Tensor3 batchnorm_apply(const Tensor3& x, BatchNorm& bn, Mode mode) {
    Batch b(x.shape, 1);
    b.values = x.values;
    auto y = batchnorm_apply(b, bn, mode);
    Tensor3 out(x.shape);
    out.values = std::move(y.values);
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

namespace {

Shape pooled_shape(Shape in, Axis axis) {
    switch (axis) {
        case Axis::height: return {1, in.w, in.d};
        case Axis::width: return {in.h, 1, in.d};
        case Axis::depth: return {in.h, in.w, 1};
    }
    return in;
}

std::size_t axis_length(Shape s, Axis axis) {
    return axis == Axis::height ? s.h : axis == Axis::width ? s.w : s.d;
}

// Flat input index of output element `o` at position `a` along the pooled axis.
struct PoolIndexer {
    Shape in;
    Axis axis;
    std::size_t operator()(std::size_t o, std::size_t a) const {
        switch (axis) {
            case Axis::height: return a * in.w * in.d + o;  // o = j*d + k
            case Axis::width: {
                const std::size_t i = o / in.d, k = o % in.d;
                return (i * in.w + a) * in.d + k;
            }
            case Axis::depth: return o * in.d + a;  // o = i*w + j
        }
        return 0;
    }
};

void pool_forward(Shape in, Axis axis, PoolMode mode, const double* x, double* y, std::size_t* argmax) {
    const Shape out = pooled_shape(in, axis);
    const std::size_t len = axis_length(in, axis);
    const PoolIndexer idx{in, axis};
    for (std::size_t o = 0; o < out.size(); ++o) {
        if (mode == PoolMode::max) {
            std::size_t best = 0;
            double bv = x[idx(o, 0)];
            for (std::size_t a = 1; a < len; ++a) {
                const double v = x[idx(o, a)];
                if (v > bv) {
                    bv = v;
                    best = a;
                }
            }
            y[o] = bv;
            if (argmax) argmax[o] = best;
        } else {
            double s = 0.0;
            for (std::size_t a = 0; a < len; ++a) s += x[idx(o, a)];
            y[o] = s / static_cast<double>(len);
        }
    }
}

void pool_backward_raw(Shape in, Axis axis, PoolMode mode, const std::size_t* argmax, const double* dy, double* dx) {
    const Shape out = pooled_shape(in, axis);
    const std::size_t len = axis_length(in, axis);
    const PoolIndexer idx{in, axis};
    std::fill(dx, dx + in.size(), 0.0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        if (mode == PoolMode::max) {
            dx[idx(o, argmax[o])] += dy[o];
        } else {
            const double g = dy[o] / static_cast<double>(len);
            for (std::size_t a = 0; a < len; ++a) dx[idx(o, a)] += g;
        }
    }
}

}  // namespace

PoolResult pool_axis(const Tensor3& x, Axis axis, PoolMode mode) {
    if (axis_length(x.shape, axis) == 0 || x.shape.size() == 0) throw UsageError("pool: empty axis");
    PoolResult r;
    r.output = Tensor3(pooled_shape(x.shape, axis));
    if (mode == PoolMode::max) r.argmax.resize(r.output.values.size());
    pool_forward(x.shape, axis, mode, x.values.data(), r.output.values.data(),
                 mode == PoolMode::max ? r.argmax.data() : nullptr);
    return r;
}

Tensor3 pool_backward(Shape in, Axis axis, PoolMode mode, const std::vector<std::size_t>& argmax,
                      const Tensor3& grad_out) {
    Tensor3 dx(in);
    pool_backward_raw(in, axis, mode, argmax.data(), grad_out.values.data(), dx.values.data());
    return dx;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

double AdamState::learning_rate(std::size_t epoch) const {
    return config.lr0 * std::pow(config.drop, static_cast<double>(epoch));
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, std::size_t epoch) {
    if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw UsageError("adam: parameter, gradient and moment sizes differ");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw NumericalError("adam: non-finite gradient at parameter " + std::to_string(i) + " (step " +
                                 std::to_string(state.step) + ")");
    const auto& c = state.config;
    ++state.step;
    const double lr = state.learning_rate(epoch);
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] + c.l2 * params[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const LossProbe& loss, std::span<const double> params, std::span<const double> analytic,
                           const GradCheckOptions& options) {
    if (params.size() != analytic.size()) throw UsageError("grad_check: gradient size mismatch");
    GradCheckReport report;
    if (params.empty()) return report;
    std::vector<double> theta(params.begin(), params.end());
    const auto base = loss(theta);

    std::vector<std::size_t> order(params.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(options.seed, {0x9c}));
    shuffle(order.begin(), order.end(), rng);
    const std::size_t wanted = options.all_parameters ? params.size() : std::min(options.probes, params.size());

    for (std::size_t idx : order) {
        if (report.probed >= wanted) break;
        const double saved = theta[idx];
        theta[idx] = saved + options.step;
        const auto plus = loss(theta);
        theta[idx] = saved - options.step;
        const auto minus = loss(theta);
        theta[idx] = saved;
        if (plus.signature != base.signature || minus.signature != base.signature) {
            ++report.skipped;
            continue;
        }
        const double numeric = (plus.loss - minus.loss) / (2.0 * options.step);
        const double err = relative_error(analytic[idx], numeric, options.floor);
        if (err > report.max_relative_error || report.probed == 0) {
            report.max_relative_error = std::max(report.max_relative_error, err);
            report.worst_index = idx;
        }
        ++report.probed;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

std::size_t LayerSpec::param_count() const {
    switch (kind) {
        case LayerKind::conv: return conv.param_count();
        case LayerKind::batchnorm: return 2 * out.d;
        default: return 0;
    }
}

Network::Network(Shape input) : input_(input) {}

Shape Network::output_shape() const { return layers_.empty() ? input_ : layers_.back().out; }

std::size_t Network::allocate(std::size_t n) {
    const std::size_t off = params_.size();
    params_.resize(off + n, 0.0);
    grads_.resize(off + n, 0.0);
    return off;
}

Network& Network::conv(const std::string& name, std::size_t fh, std::size_t fw, std::size_t filters, std::size_t sh,
                       std::size_t sw, std::vector<std::size_t> channel_offset, std::size_t fd) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::conv;
    l.in = output_shape();
    l.conv.input = l.in;
    l.conv.fh = fh;
    l.conv.fw = fw;
    l.conv.fd = fd == 0 ? l.in.d : fd;
    l.conv.filters = filters;
    l.conv.sh = sh;
    l.conv.sw = sw;
    l.conv.channel_offset = channel_offset.empty() ? std::vector<std::size_t>(filters, 0) : std::move(channel_offset);
    try {
        l.conv.check();
    } catch (const UsageError& e) {
        throw UsageError("layer '" + name + "': " + e.what());
    }
    l.out = l.conv.output();
    l.weight_offset = allocate(l.conv.weight_count());
    l.bias_offset = allocate(filters);
    layers_.push_back(std::move(l));
    return *this;
}

Network& Network::relu(const std::string& name) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::relu;
    l.in = l.out = output_shape();
    layers_.push_back(std::move(l));
    return *this;
}

Network& Network::batchnorm(const std::string& name) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::batchnorm;
    l.in = l.out = output_shape();
    const std::size_t c = l.out.d;
    l.gamma_offset = allocate(c);
    l.beta_offset = allocate(c);
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(l.gamma_offset), c, 1.0);
    l.running_mean.assign(c, 0.0);
    l.running_var.assign(c, 1.0);
    layers_.push_back(std::move(l));
    return *this;
}

Network& Network::pool(const std::string& name, Axis axis, PoolMode mode) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::pool;
    l.in = output_shape();
    if (axis_length(l.in, axis) == 0) throw UsageError("layer '" + name + "': empty pooling axis");
    l.axis = axis;
    l.pool_mode = mode;
    l.out = pooled_shape(l.in, axis);
    layers_.push_back(std::move(l));
    return *this;
}

void Network::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

std::vector<NamedCount> Network::param_counts() const {
    std::vector<NamedCount> out;
    for (const auto& l : layers_)
        if (l.param_count() > 0) out.push_back({l.name, l.param_count()});
    return out;
}

bool Network::statistics_ready() const {
    for (const auto& l : layers_)
        if (l.kind == LayerKind::batchnorm && l.bn_updates == 0) return false;
    return true;
}

const Batch& Network::forward(const Batch& in, Mode mode) {
    if (!(in.shape == input_))
        throw UsageError("network: input " + to_string(in.shape) + " does not match " + to_string(input_));
    const std::size_t L = layers_.size();
    acts_.resize(L + 1);
    bn_xhat_.resize(L);
    bn_inv_std_.resize(L);
    pool_argmax_.resize(L);
    acts_[0] = in;
    last_mode_ = mode;
    const std::size_t n = in.count;
    for (std::size_t li = 0; li < L; ++li) {
        auto& l = layers_[li];
        const Batch& x = acts_[li];
        Batch& y = acts_[li + 1];
        if (y.count != n || !(y.shape == l.out)) y = Batch(l.out, n);
        switch (l.kind) {
            case LayerKind::conv: {
                const double* w = params_.data() + l.weight_offset;
                const double* b = params_.data() + l.bias_offset;
                const auto& taps = tap_offsets(l.conv);
                for (std::size_t i = 0; i < n; ++i)
                    conv_forward_taps(l.conv, taps, x.item(i).data(), w, b, y.item(i).data());
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < x.values.size(); ++i) y.values[i] = x.values[i] < 0.0 ? 0.0 : x.values[i];  // NaN passes through
                break;
            case LayerKind::batchnorm: {
                BnView view{l.out.d,
                            params_.data() + l.gamma_offset,
                            params_.data() + l.beta_offset,
                            &l.running_mean,
                            &l.running_var,
                            &l.bn_updates,
                            bn_momentum_,
                            bn_epsilon_};
                try {
                    bn_forward(view, x.values.data(), n * l.out.h * l.out.w, y.values.data(), mode, &bn_xhat_[li],
                               &bn_inv_std_[li]);
                } catch (const NumericalError& e) {
                    throw NumericalError("layer '" + l.name + "': " + e.what());
                }
                break;
            }
            case LayerKind::pool: {
                auto& am = pool_argmax_[li];
                if (l.pool_mode == PoolMode::max) am.resize(n * l.out.size());
                for (std::size_t i = 0; i < n; ++i)
                    pool_forward(l.in, l.axis, l.pool_mode, x.item(i).data(), y.item(i).data(),
                                 l.pool_mode == PoolMode::max ? am.data() + i * l.out.size() : nullptr);
                break;
            }
        }
    }
    return acts_.back();
}

void Network::backward(const Batch& grad_out) {
    const std::size_t L = layers_.size();
    if (acts_.size() != L + 1) throw UsageError("network: backward before forward");
    if (!(grad_out.shape == output_shape()) || grad_out.count != acts_.back().count)
        throw UsageError("network: gradient shape does not match output");
    const std::size_t n = grad_out.count;
    Batch g = grad_out;
    Batch gin;
    for (std::size_t li = L; li-- > 0;) {
        auto& l = layers_[li];
        const Batch& x = acts_[li];
        const bool need_dx = li > 0;
        switch (l.kind) {
            case LayerKind::conv: {
                if (need_dx) gin = Batch(l.in, n);
                const double* w = params_.data() + l.weight_offset;
                double* dw = grads_.data() + l.weight_offset;
                double* db = grads_.data() + l.bias_offset;
                const auto& taps = tap_offsets(l.conv);
                for (std::size_t i = 0; i < n; ++i)
                    conv_backward_taps(l.conv, taps, x.item(i).data(), w, g.item(i).data(),
                                       need_dx ? gin.item(i).data() : nullptr, dw, db);
                break;
            }
            case LayerKind::relu: {
                gin = Batch(l.in, n);
                const Batch& y = acts_[li + 1];
                for (std::size_t i = 0; i < g.values.size(); ++i) gin.values[i] = y.values[i] > 0.0 ? g.values[i] : 0.0;
                break;
            }
            case LayerKind::batchnorm: {
                gin = Batch(l.in, n);
                const std::size_t C = l.out.d;
                const std::size_t rows = n * l.out.h * l.out.w;
                const double* gamma = params_.data() + l.gamma_offset;
                double* dgamma = grads_.data() + l.gamma_offset;
                double* dbeta = grads_.data() + l.beta_offset;
                const auto& inv_std = bn_inv_std_[li];
                if (last_mode_ == Mode::infer) {
                    // Running statistics are constants: plain affine map.
                    const Batch& xin = acts_[li];
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double go = g.values[r * C + c];
                            const double xh = (xin.values[r * C + c] - l.running_mean[c]) * inv_std[c];
                            dgamma[c] += go * xh;
                            dbeta[c] += go;
                            gin.values[r * C + c] = go * gamma[c] * inv_std[c];
                        }
                    }
                    break;
                }
                const auto& xhat = bn_xhat_[li];
                std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0), scale(C);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        sum_g[c] += g.values[r * C + c];
                        sum_gx[c] += g.values[r * C + c] * xhat[r * C + c];
                    }
                const double nr = static_cast<double>(rows);
                for (std::size_t c = 0; c < C; ++c) {
                    dgamma[c] += sum_gx[c];
                    dbeta[c] += sum_g[c];
                    scale[c] = gamma[c] * inv_std[c] / nr;
                }
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gin.values[r * C + c] =
                            scale[c] * (nr * g.values[r * C + c] - sum_g[c] - xhat[r * C + c] * sum_gx[c]);
                break;
            }
            case LayerKind::pool: {
                gin = Batch(l.in, n);
                const auto& am = pool_argmax_[li];
                for (std::size_t i = 0; i < n; ++i)
                    pool_backward_raw(l.in, l.axis, l.pool_mode,
                                      l.pool_mode == PoolMode::max ? am.data() + i * l.out.size() : nullptr,
                                      g.item(i).data(), gin.item(i).data());
                break;
            }
        }
        if (need_dx) std::swap(g, gin);
    }
}

std::uint64_t Network::regime_signature() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& l = layers_[li];
        if (l.kind == LayerKind::relu) {
            for (double v : acts_[li].values) mix(v > 0.0 ? 1 : 0);
        } else if (l.kind == LayerKind::pool && l.pool_mode == PoolMode::max) {
            for (auto a : pool_argmax_[li]) mix(a + 2);
        }
    }
    return h;
}

std::vector<dataio::NamedArray> Network::export_state() const {
    std::vector<dataio::NamedArray> out;
    auto slice = [this](std::size_t off, std::size_t n) {
        return std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(off),
                                   params_.begin() + static_cast<std::ptrdiff_t>(off + n));
    };
    for (const auto& l : layers_) {
        if (l.kind == LayerKind::conv) {
            const auto& c = l.conv;
            out.push_back({l.name + ".weights", {c.filters, c.fh, c.fw, c.fd}, slice(l.weight_offset, c.weight_count())});
            out.push_back({l.name + ".biases", {c.filters}, slice(l.bias_offset, c.filters)});
        } else if (l.kind == LayerKind::batchnorm) {
            const std::size_t C = l.out.d;
            out.push_back({l.name + ".gamma", {C}, slice(l.gamma_offset, C)});
            out.push_back({l.name + ".beta", {C}, slice(l.beta_offset, C)});
            out.push_back({l.name + ".running_mean", {C}, l.running_mean});
            out.push_back({l.name + ".running_var", {C}, l.running_var});
            out.push_back({l.name + ".updates", {1}, {static_cast<double>(l.bn_updates)}});
        }
    }
    return out;
}

void Network::import_state(const std::vector<dataio::NamedArray>& arrays) {
    auto load = [&](const std::string& name, std::size_t off, std::size_t n) {
        const auto& a = dataio::find_array(arrays, name);
        if (a.values.size() != n) throw DataError("parameter '" + name + "' has wrong size");
        std::copy(a.values.begin(), a.values.end(), params_.begin() + static_cast<std::ptrdiff_t>(off));
    };
    for (auto& l : layers_) {
        if (l.kind == LayerKind::conv) {
            load(l.name + ".weights", l.weight_offset, l.conv.weight_count());
            load(l.name + ".biases", l.bias_offset, l.conv.filters);
        } else if (l.kind == LayerKind::batchnorm) {
            const std::size_t C = l.out.d;
            load(l.name + ".gamma", l.gamma_offset, C);
            load(l.name + ".beta", l.beta_offset, C);
            const auto& rm = dataio::find_array(arrays, l.name + ".running_mean");
            const auto& rv = dataio::find_array(arrays, l.name + ".running_var");
            if (rm.values.size() != C || rv.values.size() != C)
                throw DataError("running statistics of '" + l.name + "' have wrong size");
            l.running_mean = rm.values;
            l.running_var = rv.values;
            l.bn_updates = static_cast<std::size_t>(dataio::find_array(arrays, l.name + ".updates").values.at(0));
        }
    }
}

}  // namespace modality::nn
