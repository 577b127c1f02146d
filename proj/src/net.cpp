#include "modality/net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "modality/error.hpp"
#include "modality/eval.hpp"
#include "modality/random.hpp"

namespace modality::net {

using nn::Batch;
using nn::Mode;
using prep::kTimeScales;

namespace {

constexpr std::size_t kInferenceChunk = 512;
const char* kTimescaleNames[] = {"none", "31", "91", "271", "811", "2431"};

void activation(nn::Network& n, const NetConfig& c, const std::string& stage) {
    if (c.bn_order == BnOrder::relu_then_bn) {
        n.relu(stage + ".relu");
        n.batchnorm(stage + ".bn");
    } else {
        n.batchnorm(stage + ".bn");
        n.relu(stage + ".relu");
    }
}

}  // namespace

bool NetConfig::is_main() const {
    return pooling == Pooling::max && input == InputKind::pitch && chroma == ChromaMode::two_chroma &&
           timescale_slot < 0 && bn_order == BnOrder::relu_then_bn;
}

std::string NetConfig::label() const {
    if (is_main()) return "main";
    std::vector<std::string> parts;
    if (pooling == Pooling::avg) parts.emplace_back("pool=avg");
    if (pooling == Pooling::fully_conv) parts.emplace_back("pool=conv");
    if (input == InputKind::magnitude) parts.emplace_back("input=mag");
    if (input == InputKind::decibel) parts.emplace_back("input=db");
    if (chroma == ChromaMode::mean_octave) parts.emplace_back("pc=mean");
    if (timescale_slot >= 0) parts.push_back(std::string("ts=") + kTimescaleNames[timescale_slot]);
    if (bn_order == BnOrder::bn_then_relu) parts.emplace_back("bn=pre");
    std::string out;
    for (const auto& p : parts) out += (out.empty() ? "" : "+") + p;
    return out;
}

NetConfig parse_variant(const std::string& label) {
    NetConfig c;
    if (label == "main") return c;
    std::stringstream ss(label);
    std::string part;
    while (std::getline(ss, part, '+')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) throw UsageError("unknown variant '" + part + "'");
        const auto key = part.substr(0, eq), val = part.substr(eq + 1);
        if (key == "pool" && val == "avg") c.pooling = Pooling::avg;
        else if (key == "pool" && val == "conv") c.pooling = Pooling::fully_conv;
        else if (key == "pool" && val == "max") c.pooling = Pooling::max;
        else if (key == "input" && val == "mag") c.input = InputKind::magnitude;
        else if (key == "input" && val == "db") c.input = InputKind::decibel;
        else if (key == "input" && val == "pitch") c.input = InputKind::pitch;
        else if (key == "pc" && val == "mean") c.chroma = ChromaMode::mean_octave;
        else if (key == "bn" && val == "pre") c.bn_order = BnOrder::bn_then_relu;
        else if (key == "ts") {
            const auto it = std::find(std::begin(kTimescaleNames), std::end(kTimescaleNames), val);
            if (it == std::end(kTimescaleNames)) throw UsageError("unknown time scale '" + val + "'");
            c.timescale_slot = static_cast<int>(it - std::begin(kTimescaleNames));
        } else {
            throw UsageError("unknown variant '" + part + "'");
        }
    }
    return c;
}

ModalityNet build_net(const NetConfig& config, std::uint64_t seed) {
    if (config.timescale_slot >= static_cast<int>(kTimeScales)) throw UsageError("timescale slot out of range");
    ModalityNet m;
    m.config = config;
    auto& n = m.network;
    n = nn::Network(config.input_shape());
    const std::size_t width = config.input_width();

    if (config.chroma == ChromaMode::two_chroma) {
        n.conv("chroma", 1, 1, 2);  // spans the 5 octaves in depth
        activation(n, config, "chroma");
        // Branch A: 1 filter on chroma 0; branch B: 5 filters on chroma 1.
        n.conv("harmony", 12, 1, 6, 1, 1, {0, 1, 1, 1, 1, 1}, 1);
    } else {
        n.conv("harmony", 12, 1, 6, 1, 1, {}, 1);
    }
    m.harmony_layer = n.layers().size() - 1;
    activation(n, config, "harmony");
    n.conv("timescale", 1, width, 6, 1, width);
    activation(n, config, "timescale");

    if (config.pooling == Pooling::fully_conv) {
        const std::size_t heights[] = {5, 4, 3, 3};
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string name = "reduce" + std::to_string(i + 1);
            n.conv(name, heights[i], 1, 2);
            activation(n, config, name);
        }
    } else {
        n.pool("pitch_pool", nn::Axis::height,
               config.pooling == Pooling::max ? nn::PoolMode::max : nn::PoolMode::avg);
        n.conv("local_fc", 1, 1, 7);
        activation(n, config, "local_fc");
    }
    n.conv("output", 1, 1, 1);
    if (!(n.output_shape() == nn::Shape{1, 1, 1}))
        throw UsageError("network assembly ended at " + nn::to_string(n.output_shape()) + ", expected 1x1x1");

    Rng rng(derive_seed(seed, {0x1417}));
    auto params = n.params();
    for (const auto& l : n.layers()) {
        if (l.kind != nn::LayerKind::conv) continue;
        const auto& g = l.conv;
        const double fan_in = static_cast<double>(g.fh * g.fw * g.fd);
        const double fan_out = static_cast<double>(g.fh * g.fw * g.filters);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t i = 0; i < g.weight_count(); ++i) params[l.weight_offset + i] = uniform(rng, -a, a);
    }
    return m;
}

std::string ParamCount::reconciliation() const {
    std::ostringstream os;
    os << "enumerated learnable parameters:";
    for (const auto& l : layers) os << ' ' << l.name << '=' << l.count;
    os << "\nweights+biases " << (total - batchnorm) << ", batch-norm gamma/beta " << batchnorm << ", total " << total
       << "\npublished total " << kPublishedParamCount << ", delta "
       << static_cast<long>(kPublishedParamCount) - static_cast<long>(total);
    if (total != kPublishedParamCount)
        os << "\nthe published figure cannot be matched exactly from the described layers; the remaining "
           << static_cast<long>(kPublishedParamCount) - static_cast<long>(total)
           << " parameters would fit an extra normalization or bias on the output stage, which is not described";
    return os.str();
}

ParamCount count_params(const NetConfig& config) {
    const auto m = build_net(config, 0);
    ParamCount pc;
    pc.layers = m.network.param_counts();
    for (const auto& l : m.network.layers()) {
        if (l.kind == nn::LayerKind::batchnorm) pc.batchnorm += l.param_count();
        pc.total += l.param_count();
    }
    pc.harmony = m.network.layers()[m.harmony_layer].param_count();
    return pc;
}

template <typename T>
void fill_input(std::span<const T> column, const NetConfig& config, double* out) {
    const std::size_t W = config.input_width();
    const std::size_t D = config.input_depth();
    for (std::size_t p = 0; p < prep::kChromaHeight; ++p) {
        for (std::size_t t = 0; t < W; ++t) {
            const std::size_t slot = config.timescale_slot < 0 ? t : static_cast<std::size_t>(config.timescale_slot);
            double* o = out + (p * W + t) * D;
            if (D == 1) {
                double s = 0.0;
                for (std::size_t k = 0; k < prep::kOctaves; ++k)
                    s += static_cast<double>(column[(12 * k + p) * kTimeScales + slot]);
                o[0] = s / static_cast<double>(prep::kOctaves);
            } else {
                for (std::size_t k = 0; k < prep::kOctaves; ++k)
                    o[k] = static_cast<double>(column[(12 * k + p) * kTimeScales + slot]);
            }
        }
    }
}

template void fill_input<float>(std::span<const float>, const NetConfig&, double*);
template void fill_input<double>(std::span<const double>, const NetConfig&, double*);

std::vector<double> frame_input(const prep::FrameTensor& frame, const NetConfig& config) {
    // Rebuild the 71 x 6 column the tensor was stacked from (row 12k+p).
    std::vector<double> column(prep::kSemitones * kTimeScales, 0.0);
    for (std::size_t p = 0; p < prep::kChromaHeight; ++p)
        for (std::size_t t = 0; t < kTimeScales; ++t)
            for (std::size_t k = 0; k < prep::kOctaves; ++k) column[(12 * k + p) * kTimeScales + t] = frame(p, t, k);
    std::vector<double> out(config.input_shape().size());
    fill_input(std::span<const double>(column), config, out.data());
    return out;
}

FrameOutput forward_frame(ModalityNet& net, const prep::FrameTensor& frame, Mode mode) {
    Batch in(net.config.input_shape(), 1);
    const auto x = frame_input(frame, net.config);
    std::copy(x.begin(), x.end(), in.values.begin());
    const auto& y = net.network.forward(in, mode);
    FrameOutput out;
    out.prediction = y.values.at(0);
    const auto& acts = net.network.activations();
    for (std::size_t i = 1; i < acts.size(); ++i) {
        nn::Tensor3 t(acts[i].shape);
        t.values = acts[i].values;
        out.intermediates.push_back(std::move(t));
    }
    return out;
}

std::vector<double> predict_frames(ModalityNet& net, const Batch& inputs) {
    if (!(inputs.shape == net.config.input_shape()))
        throw UsageError("predict: input " + nn::to_string(inputs.shape) + " does not match network input " +
                         nn::to_string(net.config.input_shape()));
    std::vector<double> out(inputs.count);
    const std::size_t per = inputs.shape.size();
    for (std::size_t b = 0; b < inputs.count; b += kInferenceChunk) {
        const std::size_t n = std::min(kInferenceChunk, inputs.count - b);
        Batch chunk(inputs.shape, n);
        std::copy_n(inputs.values.begin() + static_cast<std::ptrdiff_t>(b * per), n * per, chunk.values.begin());
        const auto& y = net.network.forward(chunk, Mode::infer);
        std::copy(y.values.begin(), y.values.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
    }
    return out;
}

double predict_segment(ModalityNet& net, const Batch& frames) {
    if (frames.count == 0 || frames.count > prep::kSegmentLength)
        throw UsageError("predict_segment: wrong frame count " + std::to_string(frames.count));
    const auto p = predict_frames(net, frames);
    return std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
}

double predict_excerpt(ModalityNet& net, const Batch& frames) {
    if (frames.count == 0) throw DataError("predict_excerpt: empty active region");
    const auto p = predict_frames(net, frames);
    return std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Batch gather_inputs(const FrameColumns& frames, std::size_t begin, std::size_t end, const NetConfig& config) {
    if (end > frames.count() || begin > end) throw UsageError("gather_inputs: frame range out of bounds");
    Batch b(config.input_shape(), end - begin);
    for (std::size_t i = begin; i < end; ++i) fill_input(frames.column(i), config, b.item(i - begin).data());
    return b;
}

void TrainHyper::validate() const {
    if (!(lr0 > 0.0) || !(drop > 0.0) || !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) ||
        !(epsilon > 0.0) || !(l2 >= 0.0) || batch == 0 || epochs == 0)
        throw UsageError("invalid training hyperparameters");
}

bool needs_restart(double train_r2, const TrainHyper& hyper) { return !(train_r2 >= hyper.restart_r2); }

std::vector<double> predict_segments(ModalityNet& net, std::span<const TrainingSegment> segments) {
    std::vector<double> out;
    out.reserve(segments.size());
    for (const auto& s : segments) {
        const auto in = gather_inputs(*s.frames, s.begin, s.end, net.config);
        const auto p = predict_frames(net, in);
        out.push_back(std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size()));
    }
    return out;
}

namespace {

double training_r2(ModalityNet& net, std::span<const TrainingSegment> segments) {
    const auto pred = predict_segments(net, segments);
    std::vector<double> truth;
    for (const auto& s : segments) truth.push_back(s.rating);
    try {
        return eval::r_squared(pred, truth);
    } catch (const NumericalError&) {
        return 0.0;
    }
}

}  // namespace

TrainResult train_cnn(std::span<const TrainingSegment> segments, const NetConfig& config, const TrainHyper& hyper,
                      std::uint64_t seed, std::ostream* log) {
    hyper.validate();
    if (segments.empty()) throw UsageError("train_cnn: empty training set");
    for (const auto& s : segments) {
        if (!s.frames || s.end <= s.begin) throw UsageError("train_cnn: empty training segment");
        if (!(s.rating >= 1.0 && s.rating <= 10.0)) throw UsageError("train_cnn: rating outside [1, 10]");
    }
    nn::AdamConfig adam{hyper.lr0, hyper.drop, hyper.beta1, hyper.beta2, hyper.epsilon, hyper.l2};
    const nn::Shape in_shape = config.input_shape();

    TrainResult best;
    bool have_best = false;
    std::vector<EpochLog> all_logs;
    for (std::size_t attempt = 0; attempt <= hyper.max_restarts; ++attempt) {
        const std::uint64_t attempt_seed = derive_seed(seed, {attempt});
        ModalityNet net = build_net(config, attempt_seed);
        nn::AdamState state(net.network.params().size(), adam);
        Rng order_rng(derive_seed(attempt_seed, {0x5f}));
        std::vector<std::size_t> order(segments.size());
        std::iota(order.begin(), order.end(), 0);

        bool diverged = false;
        for (std::size_t epoch = 0; epoch < hyper.epochs && !diverged; ++epoch) {
            shuffle(order.begin(), order.end(), order_rng);
            double loss_sum = 0.0;
            std::size_t loss_count = 0;
            for (std::size_t b0 = 0; b0 < order.size(); b0 += hyper.batch) {
                const std::size_t b1 = std::min(order.size(), b0 + hyper.batch);
                std::size_t total = 0;
                for (std::size_t i = b0; i < b1; ++i) total += segments[order[i]].end - segments[order[i]].begin;
                Batch in(in_shape, total);
                std::size_t pos = 0;
                for (std::size_t i = b0; i < b1; ++i) {
                    const auto& s = segments[order[i]];
                    for (std::size_t f = s.begin; f < s.end; ++f)
                        fill_input(s.frames->column(f), config, in.item(pos++).data());
                }
                const auto& out = net.network.forward(in, Mode::train);
                const double nseg = static_cast<double>(b1 - b0);
                Batch grad(out.shape, total);
                double loss = 0.0;
                pos = 0;
                for (std::size_t i = b0; i < b1; ++i) {
                    const auto& s = segments[order[i]];
                    const std::size_t nf = s.end - s.begin;
                    double mean = 0.0;
                    for (std::size_t f = 0; f < nf; ++f) mean += out.values[pos + f];
                    mean /= static_cast<double>(nf);
                    const double r = mean - s.rating;
                    loss += r * r / nseg;
                    const double g = 2.0 * r / nseg / static_cast<double>(nf);
                    for (std::size_t f = 0; f < nf; ++f) grad.values[pos + f] = g;
                    pos += nf;
                }
                if (!std::isfinite(loss)) {
                    diverged = true;
                    break;
                }
                net.network.zero_grads();
                net.network.backward(grad);
                try {
                    nn::adam_step(net.network.params(), net.network.grads(), state, epoch);
                } catch (const NumericalError&) {
                    diverged = true;
                    break;
                }
                loss_sum += loss;
                ++loss_count;
            }
            EpochLog entry{attempt, epoch + 1, state.learning_rate(epoch),
                           loss_count ? loss_sum / static_cast<double>(loss_count) : NAN};
            all_logs.push_back(entry);
            if (log)
                *log << "attempt " << attempt << " epoch " << entry.epoch << " lr " << entry.lr << " loss "
                     << entry.loss << '\n';
        }
        if (diverged) {
            if (log) *log << "attempt " << attempt << " diverged (NaN loss)\n";
            continue;
        }
        const double r2 = training_r2(net, segments);
        if (log) *log << "attempt " << attempt << " train_r2 " << r2 << " restarts " << attempt << '\n';
        if (!have_best || r2 > best.train_r2) {
            best.net = std::move(net);
            best.train_r2 = r2;
            have_best = true;
        }
        if (!needs_restart(r2, hyper)) {
            best.restarts = attempt;
            best.reached_threshold = true;
            best.log = std::move(all_logs);
            return best;
        }
    }
    if (!have_best) throw NumericalError("train_cnn: every attempt diverged");
    best.restarts = hyper.max_restarts;
    best.reached_threshold = false;
    best.log = std::move(all_logs);
    return best;
}

void save_net(const std::filesystem::path& path, const ModalityNet& net) {
    auto arrays = net.network.export_state();
    const auto& c = net.config;
    arrays.push_back({"config",
                      {5},
                      {static_cast<double>(c.pooling), static_cast<double>(c.input), static_cast<double>(c.chroma),
                       static_cast<double>(c.timescale_slot), static_cast<double>(c.bn_order)}});
    dataio::write_parameters(path, arrays);
}

ModalityNet load_net(const std::filesystem::path& path) {
    const auto arrays = dataio::read_parameters(path);
    const auto& cfg = dataio::find_array(arrays, "config").values;
    if (cfg.size() != 5) throw DataError("checkpoint config has wrong size");
    NetConfig c;
    c.pooling = static_cast<Pooling>(static_cast<int>(cfg[0]));
    c.input = static_cast<InputKind>(static_cast<int>(cfg[1]));
    c.chroma = static_cast<ChromaMode>(static_cast<int>(cfg[2]));
    c.timescale_slot = static_cast<int>(cfg[3]);
    c.bn_order = static_cast<BnOrder>(static_cast<int>(cfg[4]));
    auto net = build_net(c, 0);
    net.network.import_state(arrays);
    return net;
}

// ---------------------------------------------------------------------------
// Invariance
// ---------------------------------------------------------------------------

InvarianceReport key_class_invariance(ModalityNet& net, std::size_t n_vectors, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x1a7}));
    const NetConfig& cfg = net.config;
    const nn::Shape in_shape = cfg.input_shape();
    constexpr std::size_t kColumn = prep::kSemitones * kTimeScales;

    if (!net.network.statistics_ready()) {
        Batch calib(in_shape, 64);
        std::vector<double> col(kColumn);
        for (std::size_t i = 0; i < calib.count; ++i) {
            for (auto& v : col) v = uniform(rng, 0.0, 1.0);
            fill_input(std::span<const double>(col), cfg, calib.item(i).data());
        }
        net.network.forward(calib, Mode::train);
    }

    InvarianceReport report;
    std::vector<double> profile(12 * kTimeScales);
    std::vector<double> col(kColumn);
    for (std::size_t v = 0; v < n_vectors; ++v) {
        for (auto& x : profile) x = uniform(rng, 0.0, 1.0);
        Batch in(in_shape, 12);
        for (std::size_t s = 0; s < 12; ++s) {
            for (std::size_t q = 0; q < prep::kSemitones; ++q)
                for (std::size_t t = 0; t < kTimeScales; ++t) col[q * kTimeScales + t] = profile[((q + s) % 12) * kTimeScales + t];
            fill_input(std::span<const double>(col), cfg, in.item(s).data());
        }
        const auto& y = net.network.forward(in, Mode::infer);
        const std::vector<double> pred(y.values.begin(), y.values.end());
        const Batch& harmony = net.network.activations()[net.harmony_layer + 1];
        const nn::Shape hs = harmony.shape;  // 12 x W x 6
        for (std::size_t s = 0; s < 12; ++s) {
            const double denom = std::max({std::abs(pred[0]), std::abs(pred[s]), 1e-8});
            report.max_relative_deviation = std::max(report.max_relative_deviation, std::abs(pred[s] - pred[0]) / denom);
            const auto base = harmony.item(0);
            const auto shifted = harmony.item(s);
            for (std::size_t i = 0; i < hs.h; ++i)
                for (std::size_t j = 0; j < hs.w * hs.d; ++j) {
                    const double a = shifted[i * hs.w * hs.d + j];
                    const double b = base[((i + s) % hs.h) * hs.w * hs.d + j];
                    const double d = std::max({std::abs(a), std::abs(b), 1e-8});
                    report.max_equivariance_error = std::max(report.max_equivariance_error, std::abs(a - b) / d);
                }
            ++report.cases;
        }
    }
    return report;
}

}  // namespace modality::net
