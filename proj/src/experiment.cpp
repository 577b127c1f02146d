#include "modality/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::eval {

namespace fs = std::filesystem;
using dataio::DatasetTag;

// ---------------------------------------------------------------------------
// Preparation
// ---------------------------------------------------------------------------

const net::FrameColumns& PreparedExcerpt::columns(net::InputKind kind) const {
    const net::FrameColumns* c = kind == net::InputKind::pitch       ? &pitch
                                 : kind == net::InputKind::magnitude ? &magnitude
                                                                     : &decibel;
    if (c->count() == 0) throw DataError(record.id + ": input kind not prepared");
    return *c;
}

namespace {

net::FrameColumns retain(const prep::SemitoneMatrix& s, const prep::ActiveBounds& b, std::size_t stride) {
    const auto stack = prep::timescale_stack(s);
    net::FrameColumns out;
    constexpr std::size_t n = prep::kSemitones * prep::kTimeScales;
    for (std::size_t a = 0; b.start + a <= b.end; a += stride) {
        out.frame_index.push_back(static_cast<std::uint32_t>(a));
        const auto col = stack.column(b.start + a);
        for (std::size_t i = 0; i < n; ++i) out.values.push_back(static_cast<float>(col[i]));
    }
    return out;
}

}  // namespace

PreparedExcerpt prepare_excerpt(const dataio::ExcerptRecord& record, const dataio::Pitchogram& pitch,
                                const dataio::LogFreqSpectrogram& magnitude,
                                const dataio::LogFreqSpectrogram* whitened, const PrepOptions& options) {
    if (options.frame_stride == 0) throw UsageError("frame stride must be positive");
    if (pitch.frames() != magnitude.frames() || (whitened && whitened->frames() != pitch.frames()))
        throw DataError(record.id + ": frame counts differ between pitchogram and spectrogram");
    if ((options.decibel || options.features) && !whitened)
        throw DataError(record.id + ": whitened spectrogram required");

    PreparedExcerpt ex;
    ex.record = record;
    ex.bounds = prep::active_bounds(magnitude);
    ex.active_frames = ex.bounds.end - ex.bounds.start + 1;

    std::optional<prep::SemitoneMatrix> semis;
    if (options.pitch || options.features) {
        semis = prep::to_semitone_matrix(pitch);
        ex.tuning_offset_cents = semis->tuning_offset_cents;
    }
    if (options.pitch) ex.pitch = retain(*semis, ex.bounds, options.frame_stride);
    if (options.magnitude)
        ex.magnitude = retain(prep::spectrum_to_semitones(magnitude), ex.bounds, options.frame_stride);
    if (options.decibel) ex.decibel = retain(prep::spectrum_to_semitones(*whitened), ex.bounds, options.frame_stride);

    if (options.features) {
        const feats::FrameRange range{ex.bounds.start, ex.bounds.end + 1};
        ex.features.pt = feats::microtuning_features(prep::retune(pitch, ex.tuning_offset_cents), range);
        if (ex.active_frames >= 2) {
            const auto flux = feats::flux_features(*whitened, range);
            ex.features.vs = flux.vs;
            ex.features.ve = flux.ve;
        }
        ex.features.sd = feats::spectral_distribution_features(*whitened, range);
        ex.has_features = true;
    }
    return ex;
}

PreparedExcerpt prepare_excerpt(const dataio::SynthExcerpt& ex, const PrepOptions& options) {
    return prepare_excerpt(ex.record, ex.pitchogram, ex.magnitude, &ex.whitened, options);
}

PreparedExcerpt load_and_prepare(const dataio::ExcerptRecord& record, const PrepOptions& options) {
    const auto pitch = dataio::read_pitchogram(record.pitchogram_path);
    const auto mag = dataio::read_spectrogram(record.magnitude_path);
    std::optional<dataio::LogFreqSpectrogram> wdb;
    if (!record.whitened_path.empty()) wdb = dataio::read_spectrogram(record.whitened_path);
    return prepare_excerpt(record, pitch, mag, wdb ? &*wdb : nullptr, options);
}

std::vector<net::TrainingSegment> training_segments(const PreparedExcerpt& ex, net::InputKind kind, bool dedupe) {
    const auto& cols = ex.columns(kind);
    const auto plan = prep::make_segments(ex.active_frames);
    std::vector<net::TrainingSegment> out;
    for (std::size_t s : plan.starts) {
        const auto lo = std::lower_bound(cols.frame_index.begin(), cols.frame_index.end(), s);
        const auto hi = std::lower_bound(cols.frame_index.begin(), cols.frame_index.end(), s + plan.valid_length);
        net::TrainingSegment seg{&cols, static_cast<std::size_t>(lo - cols.frame_index.begin()),
                                 static_cast<std::size_t>(hi - cols.frame_index.begin()), ex.record.rating};
        if (seg.end == seg.begin) continue;
        if (dedupe && std::any_of(out.begin(), out.end(), [&](const auto& o) {
                return o.begin == seg.begin && o.end == seg.end;
            }))
            continue;
        out.push_back(seg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

std::size_t Ensemble::model_count() const {
    std::size_t n = 0;
    for (std::size_t m = 0; m < cnns.size(); ++m) n += (m < mlps.size() && !mlps[m].empty()) ? mlps[m].size() : 1;
    return n;
}

namespace {

double excerpt_prediction(net::ModalityNet& cnn, const nn::Batch& inputs) { return net::predict_excerpt(cnn, inputs); }

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& body) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    for (std::size_t t = 0; t < std::min(threads, n); ++t)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i;
                {
                    std::lock_guard lock(mu);
                    if (next >= n || failure) return;
                    i = next++;
                }
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

Ensemble train_ensemble(const std::vector<const PreparedExcerpt*>& train, const EnsembleConfig& config,
                        std::uint64_t seed, std::ostream* log) {
    if (train.empty()) throw UsageError("train_ensemble: no training excerpts");
    if (config.n_cnn == 0) throw UsageError("train_ensemble: need at least one CNN");
    const auto kind = config.net.input;

    std::vector<net::TrainingSegment> segments;
    for (const auto* ex : train) {
        const auto s = training_segments(*ex, kind, config.dedupe_segments);
        segments.insert(segments.end(), s.begin(), s.end());
    }
    std::vector<nn::Batch> inputs;
    std::vector<double> ratings;
    for (const auto* ex : train) {
        const auto& cols = ex->columns(kind);
        inputs.push_back(net::gather_inputs(cols, 0, cols.count(), config.net));
        ratings.push_back(ex->record.rating);
    }

    Ensemble ens;
    ens.config = config.net;
    ens.feature_mask = config.feature_mask;
    ens.cnns.resize(config.n_cnn);
    ens.mlps.resize(config.n_cnn);
    ens.scalers.resize(config.n_cnn);
    ens.members.resize(config.n_cnn);
    std::vector<std::string> logs(config.n_cnn);

    parallel_for(config.n_cnn, config.threads, [&](std::size_t m) {
        std::ostringstream member_log;
        auto result = net::train_cnn(segments, config.net, config.hyper, derive_seed(seed, {m}),
                                     log ? &member_log : nullptr);
        ens.members[m] = {result.train_r2, result.restarts, result.reached_threshold};
        ens.cnns[m] = std::move(result.net);
        if (config.n_mlp > 0) {
            std::vector<std::vector<double>> X;
            for (std::size_t i = 0; i < train.size(); ++i) {
                if (!train[i]->has_features) throw DataError(train[i]->record.id + ": global features missing");
                X.push_back(feats::assemble_features(excerpt_prediction(ens.cnns[m], inputs[i]), train[i]->features,
                                                     config.feature_mask));
            }
            ens.scalers[m] = rmlp::fit_scaler(X);
            for (auto& row : X) row = ens.scalers[m].apply(row);
            for (std::size_t j = 0; j < config.n_mlp; ++j)
                ens.mlps[m].push_back(rmlp::lm_train(X, ratings, derive_seed(seed, {m, 0x4d4c50, j}), config.lm));
        }
        if (log)
            member_log << "member " << m << " train_r2 " << ens.members[m].train_r2 << " restarts "
                       << ens.members[m].restarts << (ens.members[m].reached_threshold ? "" : " (below threshold)")
                       << '\n';
        logs[m] = member_log.str();
    });
    if (log)
        for (const auto& l : logs) *log << l;
    return ens;
}

EnsemblePrediction predict_ensemble(Ensemble& ens, const PreparedExcerpt& ex) {
    const auto& cols = ex.columns(ens.config.input);
    const auto inputs = net::gather_inputs(cols, 0, cols.count(), ens.config);
    EnsemblePrediction out;
    double mlp_sum = 0.0;
    std::size_t mlp_n = 0;
    for (std::size_t m = 0; m < ens.cnns.size(); ++m) {
        const double p = excerpt_prediction(ens.cnns[m], inputs);
        out.cnn_members.push_back(p);
        if (m < ens.mlps.size() && !ens.mlps[m].empty()) {
            if (!ex.has_features) throw DataError(ex.record.id + ": global features missing");
            const auto x = feats::assemble_features(p, ex.features, ens.feature_mask);
            // Sum member outputs so the fold prediction weighs every perceptron equally.
            mlp_sum += rmlp::ensemble_predict(ens.mlps[m], ens.scalers[m], x) * static_cast<double>(ens.mlps[m].size());
            mlp_n += ens.mlps[m].size();
        }
    }
    out.ecnn = std::accumulate(out.cnn_members.begin(), out.cnn_members.end(), 0.0) /
               static_cast<double>(out.cnn_members.size());
    if (mlp_n) out.emlp = mlp_sum / static_cast<double>(mlp_n);
    return out;
}

void save_ensemble_dir(const fs::path& dir, const Ensemble& ens) {
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["variant"] = ens.config.label();
    meta["features"] = feats::mask_label(ens.feature_mask);
    meta["cnn"] = ens.cnns.size();
    meta["members"] = nlohmann::json::array();
    for (std::size_t m = 0; m < ens.cnns.size(); ++m) {
        const std::string stem = "member" + std::to_string(m);
        net::save_net(dir / (stem + ".cnn"), ens.cnns[m]);
        const bool has_mlp = m < ens.mlps.size() && !ens.mlps[m].empty();
        if (has_mlp) rmlp::save_ensemble(dir / (stem + ".mlp"), ens.mlps[m], ens.scalers[m]);
        const auto& info = ens.members[m];
        meta["members"].push_back({{"cnn", stem + ".cnn"},
                                   {"mlp", has_mlp ? nlohmann::json(stem + ".mlp") : nlohmann::json()},
                                   {"train_r2", info.train_r2},
                                   {"restarts", info.restarts},
                                   {"reached_threshold", info.reached_threshold}});
    }
    std::ofstream os(dir / "ensemble.json");
    if (!os) throw DataError("cannot write " + (dir / "ensemble.json").string());
    os << meta.dump(2) << '\n';
}

Ensemble load_ensemble_dir(const fs::path& dir) {
    std::ifstream is(dir / "ensemble.json");
    if (!is) throw DataError("missing ensemble description in " + dir.string());
    nlohmann::json meta;
    try {
        is >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt ensemble description: " + std::string(e.what()));
    }
    Ensemble ens;
    ens.config = net::parse_variant(meta.at("variant").get<std::string>());
    ens.feature_mask = feats::parse_mask(meta.at("features").get<std::string>());
    for (const auto& m : meta.at("members")) {
        ens.cnns.push_back(net::load_net(dir / m.at("cnn").get<std::string>()));
        ens.mlps.emplace_back();
        ens.scalers.emplace_back();
        if (!m.at("mlp").is_null())
            ens.mlps.back() = rmlp::load_ensemble(dir / m.at("mlp").get<std::string>(), ens.scalers.back());
        ens.members.push_back({m.value("train_r2", 0.0), m.value("restarts", std::size_t{0}),
                               m.value("reached_threshold", false)});
    }
    if (ens.cnns.empty()) throw DataError("ensemble has no members");
    return ens;
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

std::uint64_t ExperimentConfig::fingerprint() const {
    std::uint64_t h = splitmix64(seed);
    auto mix = [&](double v) { h = splitmix64(h ^ std::hash<double>{}(v)); };
    for (char c : ensemble.net.label()) h = splitmix64(h ^ static_cast<std::uint64_t>(c));
    const auto& hp = ensemble.hyper;
    for (double v : {hp.lr0, hp.drop, hp.beta1, hp.beta2, hp.epsilon, hp.l2, hp.restart_r2}) mix(v);
    for (std::size_t v : {hp.batch, hp.epochs, hp.max_restarts, ensemble.n_cnn, ensemble.n_mlp, n_runs, folds})
        mix(static_cast<double>(v));
    mix(ensemble.feature_mask);
    mix(ensemble.dedupe_segments ? 1.0 : 0.0);
    return h;
}

Score score(const std::vector<double>& pred, const std::vector<double>& truth) {
    try {
        return {r_squared(pred, truth), false};
    } catch (const NumericalError&) {
        return {0.0, true};
    }
}

namespace {

void score_run(RunResult& run, const std::vector<PredictionRow>& rows, bool with_mlp) {
    std::vector<double> truth, ecnn, emlp;
    std::map<DatasetTag, std::vector<double>> t_tag, e_tag, m_tag;
    for (const auto& r : rows) {
        truth.push_back(r.truth);
        ecnn.push_back(r.ecnn);
        t_tag[r.dataset].push_back(r.truth);
        e_tag[r.dataset].push_back(r.ecnn);
        if (with_mlp) {
            emlp.push_back(*r.emlp);
            m_tag[r.dataset].push_back(*r.emlp);
        }
    }
    run.ecnn = score(ecnn, truth);
    for (const auto& [tag, t] : t_tag)
        if (t.size() >= 2) run.ecnn_by_tag[tag] = score(e_tag[tag], t);
    if (with_mlp) {
        run.emlp = score(emlp, truth);
        for (const auto& [tag, t] : t_tag)
            if (t.size() >= 2) run.emlp_by_tag[tag] = score(m_tag[tag], t);
    }
}

RowSummary summarize(const std::vector<RunResult>& runs, bool mlp, std::size_t resamples, std::uint64_t seed) {
    RowSummary s;
    std::vector<double> r2;
    std::map<DatasetTag, std::vector<double>> tags;
    for (const auto& run : runs) {
        r2.push_back(mlp ? run.emlp.r2 : run.ecnn.r2);
        for (const auto& [tag, sc] : mlp ? run.emlp_by_tag : run.ecnn_by_tag)
            if (!sc.undefined) tags[tag].push_back(sc.r2);
    }
    s.mean = std::accumulate(r2.begin(), r2.end(), 0.0) / static_cast<double>(r2.size());
    if (r2.size() >= 2) {
        BootstrapOptions b;
        b.resamples = resamples;
        b.draw_count = 0;
        b.seed = derive_seed(seed, {mlp ? 2u : 1u});
        s.ci = bootstrap_ci(r2, b);
    } else {
        s.ci = {s.mean, s.mean};
    }
    for (const auto& [tag, v] : tags) s.by_tag[tag] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    return s;
}

}  // namespace

ExperimentReport run_experiment(const std::vector<PreparedExcerpt>& dataset, const ExperimentConfig& config,
                                std::ostream* log) {
    if (config.n_runs == 0) throw UsageError("run_experiment: need at least one run");
    if (config.plans && config.plans->size() < config.n_runs)
        throw UsageError("run_experiment: fewer shared fold plans than runs");
    std::vector<DatasetTag> tags;
    for (const auto& ex : dataset) tags.push_back(ex.record.dataset);

    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.variant = config.ensemble.net.label();
    report.n_cnn = config.ensemble.n_cnn;
    report.n_mlp = config.ensemble.n_mlp;
    report.folds = config.folds;
    report.feature_mask = config.ensemble.feature_mask;
    const bool with_mlp = config.ensemble.n_mlp > 0;

    for (std::size_t run = 0; run < config.n_runs; ++run) {
        const FoldPlan plan =
            config.plans ? (*config.plans)[run] : stratified_folds(tags, config.folds, derive_seed(config.seed, {run}));
        if (plan.fold_of.size() != dataset.size()) throw UsageError("fold plan does not cover the dataset");
        report.plans.push_back(plan);
        RunResult result;
        result.plan_fingerprint = plan.fingerprint();
        std::vector<PredictionRow> rows;
        for (std::size_t fold = 0; fold < plan.k; ++fold) {
            std::vector<const PreparedExcerpt*> train;
            for (auto i : plan.training(fold)) train.push_back(&dataset[i]);
            if (log) *log << "run " << run << " fold " << fold << ": training on " << train.size() << " excerpts\n";
            auto ens = train_ensemble(train, config.ensemble, derive_seed(config.seed, {run, fold}), log);
            const bool any = std::any_of(ens.members.begin(), ens.members.end(),
                                         [](const MemberLog& m) { return m.reached_threshold; });
            if (!any && config.abort_on_unconverged_fold) {
                std::ostringstream os;
                os << "run " << run << " fold " << fold << ": no CNN reached training R^2 "
                   << config.ensemble.hyper.restart_r2 << " within " << config.ensemble.hyper.max_restarts
                   << " restarts (best";
                for (const auto& m : ens.members) os << ' ' << m.train_r2;
                os << ')';
                throw NumericalError(os.str());
            }
            result.members.insert(result.members.end(), ens.members.begin(), ens.members.end());
            result.models_per_fold.push_back(ens.model_count());
            for (auto i : plan.folds[fold]) {
                const auto p = predict_ensemble(ens, dataset[i]);
                rows.push_back({run, fold, i, dataset[i].record.id, dataset[i].record.dataset,
                                dataset[i].record.rating, p.ecnn, p.emlp});
            }
        }
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
        score_run(result, rows, with_mlp);
        if (log) {
            *log << "run " << run << " ECNN R2 " << result.ecnn.r2;
            if (with_mlp) *log << " ECNN+EMLP R2 " << result.emlp.r2;
            *log << '\n';
        }
        report.runs.push_back(std::move(result));
        report.predictions.insert(report.predictions.end(), rows.begin(), rows.end());
    }
    report.ecnn = summarize(report.runs, false, config.bootstrap_resamples, config.seed);
    if (with_mlp) report.emlp = summarize(report.runs, true, config.bootstrap_resamples, config.seed);
    return report;
}

std::string ExperimentReport::text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "variant " << variant << "  runs " << runs.size() << "  folds " << folds << "  cnn " << n_cnn << "  mlp "
       << n_mlp << "  features " << feats::mask_label(feature_mask) << "\n";
    os << "config " << std::hex << config_fingerprint << std::dec << "\n\n";
    std::vector<DatasetTag> tags;
    for (const auto& p : predictions)
        if (std::find(tags.begin(), tags.end(), p.dataset) == tags.end()) tags.push_back(p.dataset);
    std::sort(tags.begin(), tags.end());
    os << std::left << std::setw(12) << "model" << std::right << std::setw(9) << "R2" << std::setw(9) << "CI_lo"
       << std::setw(9) << "CI_hi";
    for (auto t : tags) os << std::setw(9) << dataio::to_string(t);
    os << '\n';
    auto row = [&](const char* name, const std::optional<RowSummary>& s) {
        os << std::left << std::setw(12) << name << std::right;
        if (!s) {
            os << std::setw(9) << "n/a" << '\n';
            return;
        }
        os << std::setw(9) << s->mean << std::setw(9) << s->ci.lo << std::setw(9) << s->ci.hi;
        for (auto t : tags) {
            const auto it = s->by_tag.find(t);
            if (it == s->by_tag.end()) os << std::setw(9) << "n/a";
            else os << std::setw(9) << it->second;
        }
        os << '\n';
    };
    row("ECNN", ecnn);
    row("ECNN+EMLP", emlp);
    os << "\nper run:\n";
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto& run = runs[r];
        std::size_t restarts = 0, below = 0;
        for (const auto& m : run.members) {
            restarts += m.restarts;
            below += m.reached_threshold ? 0 : 1;
        }
        os << "  run " << r << "  ECNN " << run.ecnn.r2 << (run.ecnn.undefined ? " (undefined)" : "");
        if (emlp) os << "  ECNN+EMLP " << run.emlp.r2 << (run.emlp.undefined ? " (undefined)" : "");
        os << "  models/fold " << (run.models_per_fold.empty() ? 0 : run.models_per_fold.front()) << "  restarts "
           << restarts << "  below-threshold " << below << "  plan " << std::hex << run.plan_fingerprint << std::dec
           << '\n';
    }
    return os.str();
}

std::string ExperimentReport::table() const {
    std::ostringstream os;
    os.precision(17);
    os << "run,fold,id,dataset,truth,ecnn,ecnn_emlp\n";
    for (const auto& p : predictions) {
        os << p.run << ',' << p.fold << ',' << p.id << ',' << dataio::to_string(p.dataset) << ',' << p.truth << ','
           << p.ecnn << ',';
        if (p.emlp) os << *p.emlp;
        else os << "NA";
        os << '\n';
    }
    return os.str();
}

std::string ExperimentReport::scatter() const {
    struct Acc {
        std::string id;
        DatasetTag tag;
        double truth = 0, ecnn = 0, emlp = 0;
        std::size_t n = 0;
    };
    std::map<std::size_t, Acc> by_index;
    for (const auto& p : predictions) {
        auto& a = by_index[p.index];
        a.id = p.id;
        a.tag = p.dataset;
        a.truth = p.truth;
        a.ecnn += p.ecnn;
        a.emlp += p.emlp.value_or(0.0);
        ++a.n;
    }
    std::ostringstream os;
    os.precision(10);
    os << "id,dataset,rating,prediction,prediction_emlp\n";
    for (const auto& [i, a] : by_index) {
        const double n = static_cast<double>(a.n);
        os << a.id << ',' << dataio::to_string(a.tag) << ',' << a.truth << ',' << a.ecnn / n << ',';
        if (emlp) os << a.emlp / n;
        else os << "NA";
        os << '\n';
    }
    return os.str();
}

}  // namespace modality::eval
