#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "modality/nncore.hpp"
#include "modality/prep.hpp"

namespace modality::net {

enum class Pooling { max, avg, fully_conv };
enum class InputKind { pitch, magnitude, decibel };
enum class ChromaMode { two_chroma, mean_octave };
enum class BnOrder { relu_then_bn, bn_then_relu };

/// One CNN variant. The main model is (max, pitch, two_chroma, all time scales).
struct NetConfig {
    Pooling pooling = Pooling::max;
    InputKind input = InputKind::pitch;
    ChromaMode chroma = ChromaMode::two_chroma;
    int timescale_slot = -1;  // -1: all six; 0-5: that slot only (0 = unfiltered)
    BnOrder bn_order = BnOrder::relu_then_bn;

    bool is_main() const;
    std::size_t input_width() const { return timescale_slot < 0 ? prep::kTimeScales : 1; }
    std::size_t input_depth() const { return chroma == ChromaMode::two_chroma ? prep::kOctaves : 1; }
    nn::Shape input_shape() const { return {prep::kChromaHeight, input_width(), input_depth()}; }
    /// Short label such as "main", "pool=avg", "ts=811", "input=mag", "pc=mean".
    std::string label() const;
    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

NetConfig parse_variant(const std::string& label);

struct ModalityNet {
    NetConfig config;
    nn::Network network;
    std::size_t harmony_layer = 0;  // index of the harmony conv in network.layers()
};

/// Assembles the layer chain for `config` and draws weights uniformly in
/// +-sqrt(6 / (fan_in + fan_out)) with zero biases.
ModalityNet build_net(const NetConfig& config, std::uint64_t seed);

struct ParamCount {
    std::vector<nn::NamedCount> layers;
    std::size_t harmony = 0;
    std::size_t batchnorm = 0;
    std::size_t total = 0;

    /// Explains the difference to the published total of 413.
    std::string reconciliation() const;
};

inline constexpr std::size_t kPublishedParamCount = 413;

ParamCount count_params(const NetConfig& config);

/// Network input for one frame from a 71 x 6 (row, slot) stack column.
template <typename T>
void fill_input(std::span<const T> column, const NetConfig& config, double* out);
std::vector<double> frame_input(const prep::FrameTensor& frame, const NetConfig& config);

struct FrameOutput {
    double prediction = 0.0;
    std::vector<nn::Tensor3> intermediates;  // output of each layer
};

FrameOutput forward_frame(ModalityNet& net, const prep::FrameTensor& frame, nn::Mode mode);

/// Frame predictions in inference mode for a batch of network inputs.
std::vector<double> predict_frames(ModalityNet& net, const nn::Batch& inputs);
/// Mean of the frame predictions; accepts 1-1550 frames (shorter segments are
/// zero-padded in time and the padding is not scored).
double predict_segment(ModalityNet& net, const nn::Batch& frames);
/// Mean over every active frame of an excerpt.
double predict_excerpt(ModalityNet& net, const nn::Batch& frames);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Stack columns (71 x 6 floats) for the retained frames of one excerpt.
struct FrameColumns {
    std::vector<std::uint32_t> frame_index;
    std::vector<float> values;

    std::size_t count() const { return frame_index.size(); }
    std::span<const float> column(std::size_t i) const {
        constexpr std::size_t n = prep::kSemitones * prep::kTimeScales;
        return {values.data() + i * n, n};
    }
};

/// Frames [begin, end) of `frames` with the segment's rating.
struct TrainingSegment {
    const FrameColumns* frames = nullptr;
    std::size_t begin = 0;
    std::size_t end = 0;
    double rating = 0.0;
};

nn::Batch gather_inputs(const FrameColumns& frames, std::size_t begin, std::size_t end, const NetConfig& config);

struct TrainHyper {
    double lr0 = 0.01;
    double drop = 0.98;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double l2 = 1e-4;
    std::size_t batch = 32;      // segments
    std::size_t epochs = 25;
    double restart_r2 = 0.83;
    std::size_t max_restarts = 5;

    void validate() const;
};

struct EpochLog {
    std::size_t attempt = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    ModalityNet net;
    double train_r2 = 0.0;
    std::size_t restarts = 0;
    bool reached_threshold = false;  // false: best attempt returned after the restart cap
    std::vector<EpochLog> log;
};

/// True when a finished attempt must be reinitialized and retrained.
bool needs_restart(double train_r2, const TrainHyper& hyper);

/// 25 epochs of mini-batch Adam on segment-mean MSE, restarting from a fresh
/// derived seed while the training-split R^2 stays below the threshold.
TrainResult train_cnn(std::span<const TrainingSegment> segments, const NetConfig& config, const TrainHyper& hyper,
                      std::uint64_t seed, std::ostream* log = nullptr);

/// Segment predictions (inference mode) for each training segment.
std::vector<double> predict_segments(ModalityNet& net, std::span<const TrainingSegment> segments);

void save_net(const std::filesystem::path& path, const ModalityNet& net);
ModalityNet load_net(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Key-class invariance
// ---------------------------------------------------------------------------

struct InvarianceReport {
    double max_relative_deviation = 0.0;   // frame predictions across transpositions
    double max_equivariance_error = 0.0;   // harmony-layer rows vs cyclic rotation
    std::size_t cases = 0;
};

/// Builds frames from random 12-periodic semitone columns and all twelve of
/// their transpositions and compares inference-mode predictions. Networks
/// without batch-norm statistics are first calibrated on random frames.
InvarianceReport key_class_invariance(ModalityNet& net, std::size_t n_vectors, std::uint64_t seed);

}  // namespace modality::net
