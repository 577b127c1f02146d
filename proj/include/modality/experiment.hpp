#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modality/dataio.hpp"
#include "modality/eval.hpp"
#include "modality/feats.hpp"
#include "modality/net.hpp"
#include "modality/prep.hpp"
#include "modality/rmlp.hpp"

namespace modality::eval {

// ---------------------------------------------------------------------------
// Prepared excerpts
// ---------------------------------------------------------------------------

struct PrepOptions {
    /// Keep every n-th active frame. 1 keeps all of them.
    std::size_t frame_stride = 1;
    bool pitch = true;
    bool magnitude = false;
    bool decibel = false;
    bool features = true;
};

struct PreparedExcerpt {
    dataio::ExcerptRecord record;
    prep::ActiveBounds bounds;
    std::size_t active_frames = 0;
    int tuning_offset_cents = 0;
    net::FrameColumns pitch, magnitude, decibel;  // frame_index is relative to bounds.start
    feats::GlobalFeatures features;
    bool has_features = false;

    /// Throws DataError when the input kind was not prepared.
    const net::FrameColumns& columns(net::InputKind kind) const;
};

PreparedExcerpt prepare_excerpt(const dataio::ExcerptRecord& record, const dataio::Pitchogram& pitch,
                                const dataio::LogFreqSpectrogram& magnitude,
                                const dataio::LogFreqSpectrogram* whitened, const PrepOptions& options);
PreparedExcerpt prepare_excerpt(const dataio::SynthExcerpt& ex, const PrepOptions& options);
/// Reads the tensors named by the record.
PreparedExcerpt load_and_prepare(const dataio::ExcerptRecord& record, const PrepOptions& options);

/// Segment ranges over the retained frames of one excerpt.
std::vector<net::TrainingSegment> training_segments(const PreparedExcerpt& ex, net::InputKind kind, bool dedupe);

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

struct MemberLog {
    double train_r2 = 0.0;
    std::size_t restarts = 0;
    bool reached_threshold = false;
};

struct EnsembleConfig {
    net::NetConfig net;
    net::TrainHyper hyper;
    std::size_t n_cnn = 10;
    std::size_t n_mlp = 20;
    unsigned feature_mask = feats::kAllGroups;
    rmlp::LmOptions lm;
    bool dedupe_segments = false;
    std::size_t threads = 1;
};

/// n_cnn CNNs, and per CNN an n_mlp perceptron ensemble on (cnn, global features).
struct Ensemble {
    net::NetConfig config;
    unsigned feature_mask = feats::kAllGroups;
    std::vector<net::ModalityNet> cnns;
    std::vector<std::vector<rmlp::MlpParams>> mlps;
    std::vector<rmlp::MinMaxScaler> scalers;
    std::vector<MemberLog> members;

    std::size_t model_count() const;
};

Ensemble train_ensemble(const std::vector<const PreparedExcerpt*>& train, const EnsembleConfig& config,
                        std::uint64_t seed, std::ostream* log = nullptr);

struct EnsemblePrediction {
    double ecnn = 0.0;
    std::optional<double> emlp;
    std::vector<double> cnn_members;
};

EnsemblePrediction predict_ensemble(Ensemble& ensemble, const PreparedExcerpt& ex);

void save_ensemble_dir(const std::filesystem::path& dir, const Ensemble& ensemble);
Ensemble load_ensemble_dir(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Cross-validated experiment
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    EnsembleConfig ensemble;
    std::size_t n_runs = 10;
    std::size_t folds = 10;
    std::size_t bootstrap_resamples = 1'000'000;
    std::uint64_t seed = 0;
    /// Abort the run when no CNN of a fold reaches the restart threshold.
    bool abort_on_unconverged_fold = true;
    /// Fold plans to reuse instead of drawing new ones (one per run).
    const std::vector<FoldPlan>* plans = nullptr;

    std::uint64_t fingerprint() const;
};

struct PredictionRow {
    std::size_t run = 0;
    std::size_t fold = 0;
    std::size_t index = 0;
    std::string id;
    dataio::DatasetTag dataset = dataio::DatasetTag::SYNTH;
    double truth = 0.0;
    double ecnn = 0.0;
    std::optional<double> emlp;
};

struct Score {
    double r2 = 0.0;
    bool undefined = false;  // constant predictions or truths; r2 reported as 0
};

/// r_squared, with zero-variance inputs mapped to (0, undefined).
Score score(const std::vector<double>& pred, const std::vector<double>& truth);

struct RunResult {
    std::uint64_t plan_fingerprint = 0;
    Score ecnn, emlp;
    std::map<dataio::DatasetTag, Score> ecnn_by_tag, emlp_by_tag;
    std::vector<std::size_t> models_per_fold;
    std::vector<MemberLog> members;
};

struct RowSummary {
    double mean = 0.0;
    Interval ci;
    std::map<dataio::DatasetTag, double> by_tag;
};

struct ExperimentReport {
    std::uint64_t config_fingerprint = 0;
    std::string variant;
    std::size_t n_cnn = 0, n_mlp = 0, folds = 0;
    unsigned feature_mask = feats::kAllGroups;
    std::vector<FoldPlan> plans;
    std::vector<RunResult> runs;
    std::vector<PredictionRow> predictions;
    RowSummary ecnn;
    std::optional<RowSummary> emlp;

    std::string text() const;
    /// run,fold,id,dataset,truth,ecnn,ecnn_emlp
    std::string table() const;
    /// id,dataset,rating,prediction,prediction_emlp: mean over runs per excerpt.
    std::string scatter() const;
};

ExperimentReport run_experiment(const std::vector<PreparedExcerpt>& dataset, const ExperimentConfig& config,
                                std::ostream* log = nullptr);

}  // namespace modality::eval
