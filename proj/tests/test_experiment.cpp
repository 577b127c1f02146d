#include "doctest.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "modality/error.hpp"
#include "modality/experiment.hpp"
#include "modality/random.hpp"
#include "support.hpp"

using namespace modality;
using namespace modality::eval;
using dataio::DatasetTag;
using dataio::SynthSpec;

namespace {

SynthSpec small_spec(std::size_t i, double major_fraction, std::uint64_t seed) {
    SynthSpec s;
    s.id = "x" + std::to_string(i);
    s.key_class = static_cast<int>((i * 5) % 12);
    s.major_fraction = major_fraction;
    s.n_chords = 4;
    s.chord_dur_s = 0.6;
    s.tuning_offset_cents = static_cast<int>(i % 7) * 9 - 27;
    s.seed = derive_seed(seed, {i});
    return s;
}

// Ratings 1 + 9 k/4 with k cycling through 0..4; tags alternate between D1 and D2.
std::vector<PreparedExcerpt> small_set(std::size_t n, std::size_t stride, std::uint64_t seed, bool features = true) {
    PrepOptions o;
    o.frame_stride = stride;
    o.features = features;
    std::vector<PreparedExcerpt> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto spec = small_spec(i, static_cast<double>(i % 5) / 4.0, seed);
        spec.dataset = i % 2 ? DatasetTag::D2 : DatasetTag::D1;
        out.push_back(prepare_excerpt(dataio::synth_excerpt(spec), o));
    }
    return out;
}

ExperimentConfig quick_config() {
    ExperimentConfig c;
    c.n_runs = 1;
    c.folds = 4;
    c.ensemble.n_cnn = 1;
    c.ensemble.n_mlp = 0;
    c.ensemble.hyper.epochs = 2;
    c.ensemble.hyper.batch = 4;
    c.ensemble.hyper.restart_r2 = 0.0;
    c.ensemble.dedupe_segments = true;
    c.ensemble.lm.epochs = 1;
    c.bootstrap_resamples = 2000;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("prepare_excerpt trims silence and keeps every n-th active frame") {
    auto spec = small_spec(0, 1.0, 1);
    spec.lead_silence_s = 0.5;
    spec.tail_silence_s = 0.3;
    spec.tuning_offset_cents = 21;
    const auto ex = dataio::synth_excerpt(spec);
    PrepOptions o;
    o.frame_stride = 8;
    const auto p = prepare_excerpt(ex, o);
    const auto first = ex.chords.front().begin;
    const auto last = ex.chords.back().end - 1;
    // The level is smoothed over 61 frames, so edges move by at most half of that.
    CHECK(p.bounds.start + 30 >= first);
    CHECK(p.bounds.start <= first + 30);
    CHECK(p.bounds.end + 30 >= last);
    CHECK(p.bounds.end <= last + 30);
    CHECK(p.active_frames == p.bounds.end - p.bounds.start + 1);
    CHECK(p.pitch.count() == (p.active_frames + 7) / 8);
    for (std::size_t i = 0; i < p.pitch.count(); ++i) CHECK(p.pitch.frame_index[i] == 8 * i);
    CHECK(p.tuning_offset_cents == 21);
    CHECK(p.has_features);
    CHECK(p.features.pt.size() > 0);
    CHECK_THROWS_AS(p.columns(net::InputKind::magnitude), DataError);
    CHECK_THROWS_AS(prepare_excerpt(ex, PrepOptions{0}), UsageError);
}

TEST_CASE("prepare_excerpt rejects mismatched frame counts and a missing whitened spectrogram") {
    const auto ex = dataio::synth_excerpt(small_spec(1, 0.5, 2));
    auto shorter = ex.magnitude;
    shorter.values = dataio::Matrix(shorter.bins(), ex.magnitude.frames() - 1, 0.0f);
    CHECK_THROWS_AS(prepare_excerpt(ex.record, ex.pitchogram, shorter, &ex.whitened, PrepOptions{}), DataError);
    CHECK_THROWS_AS(prepare_excerpt(ex.record, ex.pitchogram, ex.magnitude, nullptr, PrepOptions{}), DataError);
    PrepOptions pitch_only;
    pitch_only.features = false;
    CHECK_NOTHROW(prepare_excerpt(ex.record, ex.pitchogram, ex.magnitude, nullptr, pitch_only));
}

TEST_CASE("load_and_prepare matches in-memory preparation") {
    testsupport::TempDir dir("prep");
    const auto ex = dataio::synth_excerpt(small_spec(2, 0.25, 3));
    const auto rec = dataio::write_excerpt(dir.path(), ex);
    PrepOptions o;
    o.frame_stride = 4;
    o.magnitude = true;
    o.decibel = true;
    const auto a = prepare_excerpt(ex, o);
    const auto b = load_and_prepare(rec, o);
    CHECK(a.pitch.values == b.pitch.values);
    CHECK(a.magnitude.values == b.magnitude.values);
    CHECK(a.decibel.values == b.decibel.values);
    CHECK(a.features.sd == b.features.sd);
}

TEST_CASE("short excerpts give six copies of one segment, deduplicated on request") {
    const auto set = small_set(1, 4, 4);
    const auto& ex = set.front();
    REQUIRE(ex.active_frames < prep::kSegmentLength);
    const auto all = training_segments(ex, net::InputKind::pitch, false);
    CHECK(all.size() == prep::kSegments);
    for (const auto& s : all) {
        CHECK(s.begin == 0);
        CHECK(s.end == ex.pitch.count());
        CHECK(s.rating == ex.record.rating);
    }
    CHECK(training_segments(ex, net::InputKind::pitch, true).size() == 1);
}

TEST_CASE("long excerpts give six distinct segments of 1550 frames") {
    auto spec = small_spec(3, 0.5, 6);
    spec.n_chords = 8;
    spec.chord_dur_s = 2.0;
    PrepOptions o;
    o.features = false;
    const auto ex = prepare_excerpt(dataio::synth_excerpt(spec), o);
    REQUIRE(ex.active_frames > prep::kSegmentLength);
    const auto segs = training_segments(ex, net::InputKind::pitch, true);
    CHECK(segs.size() == prep::kSegments);
    std::set<std::size_t> begins;
    for (const auto& s : segs) {
        begins.insert(s.begin);
        CHECK(ex.pitch.frame_index[s.end - 1] - ex.pitch.frame_index[s.begin] + 1 == prep::kSegmentLength);
    }
    CHECK(begins.size() == prep::kSegments);
    CHECK(segs.back().end == ex.pitch.count());
}

TEST_CASE("pure major and pure minor excerpts are separated within 25 epochs") {
    PrepOptions o;
    o.frame_stride = 16;
    o.features = false;
    std::vector<PreparedExcerpt> set;
    for (std::size_t i = 0; i < 32; ++i) {
        auto spec = small_spec(i, i % 2 ? 1.0 : 0.0, 7);
        spec.vibrato_cents = 10.0;
        set.push_back(prepare_excerpt(dataio::synth_excerpt(spec), o));
    }
    std::vector<net::TrainingSegment> segs;
    for (const auto& ex : set) {
        const auto s = training_segments(ex, net::InputKind::pitch, true);
        segs.insert(segs.end(), s.begin(), s.end());
    }
    net::TrainHyper h;
    h.batch = 4;
    const auto r = net::train_cnn(segs, net::NetConfig{}, h, 3);
    CHECK(r.train_r2 > 0.95);
    CHECK(r.log.size() == (r.restarts + 1) * h.epochs);
}

TEST_CASE("one run with one CNN and no perceptrons is plain k-fold ECNN evaluation") {
    const auto set = small_set(12, 8, 8, false);
    const auto cfg = quick_config();
    const auto rep = run_experiment(set, cfg);
    REQUIRE(rep.runs.size() == 1);
    CHECK_FALSE(rep.emlp.has_value());
    CHECK(rep.predictions.size() == set.size());
    CHECK(rep.runs[0].models_per_fold == std::vector<std::size_t>(cfg.folds, 1));
    const auto& plan = rep.plans[0];
    std::vector<double> pred, truth;
    for (std::size_t i = 0; i < rep.predictions.size(); ++i) {
        const auto& p = rep.predictions[i];
        CHECK(p.index == i);
        CHECK(p.fold == plan.fold_of[i]);
        CHECK_FALSE(p.emlp.has_value());
        pred.push_back(p.ecnn);
        truth.push_back(p.truth);
    }
    CHECK(rep.runs[0].ecnn.r2 == r_squared(pred, truth));
    CHECK(rep.ecnn.mean == rep.runs[0].ecnn.r2);
    CHECK(rep.ecnn.ci.lo == rep.ecnn.mean);
    CHECK(rep.ecnn.by_tag.count(DatasetTag::D1) == 1);
    CHECK(rep.ecnn.by_tag.count(DatasetTag::D2) == 1);

    // Fold 0 reproduced by hand: same training split, same derived seed.
    std::vector<const PreparedExcerpt*> train;
    for (auto i : plan.training(0)) train.push_back(&set[i]);
    auto ens = train_ensemble(train, cfg.ensemble, derive_seed(cfg.seed, {0, 0}));
    for (auto i : plan.folds[0]) CHECK(predict_ensemble(ens, set[i]).ecnn == rep.predictions[i].ecnn);
}

TEST_CASE("validation excerpts never appear in their fold's training split") {
    const auto set = small_set(12, 8, 9, false);
    auto cfg = quick_config();
    cfg.n_runs = 2;
    const auto rep = run_experiment(set, cfg);
    REQUIRE(rep.plans.size() == 2);
    CHECK(rep.plans[0].fingerprint() != rep.plans[1].fingerprint());
    for (const auto& plan : rep.plans)
        for (std::size_t f = 0; f < plan.k; ++f) {
            const auto tr = plan.training(f);
            for (auto i : plan.folds[f]) CHECK_FALSE(std::binary_search(tr.begin(), tr.end(), i));
            CHECK(tr.size() + plan.folds[f].size() == set.size());
        }
    CHECK(rep.predictions.size() == 2 * set.size());
}

TEST_CASE("default-size ensembles average 10 x 20 = 200 models per fold") {
    const auto set = small_set(8, 16, 10);
    auto cfg = quick_config();
    cfg.folds = 2;
    cfg.ensemble.n_cnn = 10;
    cfg.ensemble.n_mlp = 20;
    cfg.ensemble.hyper.epochs = 1;
    const auto rep = run_experiment(set, cfg);
    CHECK(rep.runs[0].models_per_fold == std::vector<std::size_t>{200, 200});
    CHECK(rep.runs[0].members.size() == 20);
    REQUIRE(rep.emlp.has_value());
    for (const auto& p : rep.predictions) CHECK(p.emlp.has_value());
    const auto text = rep.text();
    CHECK(text.find("ECNN ") != std::string::npos);
    CHECK(text.find("ECNN+EMLP") != std::string::npos);
    CHECK(text.find("models/fold 200") != std::string::npos);
}

TEST_CASE("fixed seeds reproduce reports bit-identically, also with worker threads") {
    const auto set = small_set(10, 8, 11);
    auto cfg = quick_config();
    cfg.n_runs = 2;
    cfg.ensemble.n_cnn = 2;
    cfg.ensemble.n_mlp = 2;
    const auto a = run_experiment(set, cfg);
    const auto b = run_experiment(set, cfg);
    CHECK(a.text() == b.text());
    CHECK(a.table() == b.table());
    CHECK(a.scatter() == b.scatter());
    cfg.ensemble.threads = 2;
    const auto c = run_experiment(set, cfg);
    CHECK(a.table() == c.table());
    cfg.seed = 6;
    CHECK(run_experiment(set, cfg).table() != a.table());
}

TEST_CASE("report tables carry one row per prediction and one scatter row per excerpt") {
    const auto set = small_set(8, 8, 12, false);
    auto cfg = quick_config();
    cfg.n_runs = 2;
    const auto rep = run_experiment(set, cfg);
    std::istringstream table(rep.table());
    std::string line;
    std::getline(table, line);
    CHECK(line == "run,fold,id,dataset,truth,ecnn,ecnn_emlp");
    std::size_t rows = 0;
    while (std::getline(table, line)) {
        ++rows;
        CHECK(line.substr(line.size() - 3) == ",NA");
    }
    CHECK(rows == 2 * set.size());
    std::istringstream scatter(rep.scatter());
    std::getline(scatter, line);
    CHECK(line == "id,dataset,rating,prediction,prediction_emlp");
    rows = 0;
    while (std::getline(scatter, line)) ++rows;
    CHECK(rows == set.size());
}

TEST_CASE("a fold without any converged CNN aborts unless told to keep going") {
    const auto set = small_set(8, 16, 13, false);
    auto cfg = quick_config();
    cfg.folds = 2;
    cfg.ensemble.hyper.epochs = 1;
    cfg.ensemble.hyper.restart_r2 = 1.5;
    cfg.ensemble.hyper.max_restarts = 0;
    CHECK_THROWS_AS(run_experiment(set, cfg), NumericalError);
    cfg.abort_on_unconverged_fold = false;
    const auto rep = run_experiment(set, cfg);
    for (const auto& m : rep.runs[0].members) CHECK_FALSE(m.reached_threshold);
    CHECK(rep.text().find("below-threshold 2") != std::string::npos);
}

TEST_CASE("shared fold plans are reused verbatim") {
    const auto set = small_set(8, 16, 14, false);
    std::vector<DatasetTag> tags;
    for (const auto& ex : set) tags.push_back(ex.record.dataset);
    const std::vector<FoldPlan> plans{stratified_folds(tags, 4, 99)};
    auto cfg = quick_config();
    cfg.ensemble.hyper.epochs = 1;
    cfg.plans = &plans;
    const auto rep = run_experiment(set, cfg);
    CHECK(rep.runs[0].plan_fingerprint == plans[0].fingerprint());
    cfg.n_runs = 2;
    CHECK_THROWS_AS(run_experiment(set, cfg), UsageError);
}

TEST_CASE("saved ensembles predict identically after loading") {
    testsupport::TempDir dir("ens");
    const auto set = small_set(6, 16, 15);
    std::vector<const PreparedExcerpt*> train;
    for (const auto& ex : set) train.push_back(&ex);
    EnsembleConfig cfg;
    cfg.n_cnn = 2;
    cfg.n_mlp = 3;
    cfg.hyper.epochs = 2;
    cfg.hyper.batch = 2;
    cfg.hyper.restart_r2 = 0.0;
    cfg.lm.epochs = 2;
    cfg.feature_mask = feats::parse_mask("pt+sd");
    auto ens = train_ensemble(train, cfg, 4);
    CHECK(ens.model_count() == 6);
    save_ensemble_dir(dir.path(), ens);
    auto back = load_ensemble_dir(dir.path());
    CHECK(back.config == ens.config);
    CHECK(back.feature_mask == ens.feature_mask);
    REQUIRE(back.cnns.size() == 2);
    for (const auto& ex : set) {
        const auto a = predict_ensemble(ens, ex);
        const auto b = predict_ensemble(back, ex);
        CHECK(a.ecnn == b.ecnn);
        REQUIRE(b.emlp.has_value());
        CHECK(*a.emlp == *b.emlp);
    }
    CHECK_THROWS_AS(load_ensemble_dir(dir / "nowhere"), DataError);
}
