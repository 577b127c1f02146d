#include "modality/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"

#include "modality/ablate.hpp"
#include "modality/dataio.hpp"
#include "modality/error.hpp"
#include "modality/eval.hpp"
#include "modality/experiment.hpp"
#include "modality/random.hpp"

namespace modality::cli {

namespace fs = std::filesystem;

namespace {

std::string default_out() {
    const char* env = std::getenv(kOutputDirEnv);
    return env && *env ? env : "modality_out";
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw DataError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os || !(os << text) || !os.flush()) throw DataError("cannot write " + path.string());
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

struct Sizing {
    net::TrainHyper hyper;
    std::size_t runs = 10;
    std::size_t folds = 10;
    std::size_t cnn = 10;
    std::size_t mlp = 20;
    std::size_t resamples = 1'000'000;
    std::uint64_t seed = 0;
    std::size_t stride = 1;
    bool dedupe = false;
    bool keep_unconverged = false;
    std::size_t threads = 1;
    std::string features = "all";
    bool verbose = false;
};

void add_sizing(CLI::App* sub, Sizing& s) {
    sub->add_option("--runs", s.runs, "complete repetitions of the cross-validation")->capture_default_str();
    sub->add_option("--folds", s.folds, "cross-validation folds")->capture_default_str();
    sub->add_option("--cnn-ensemble", s.cnn, "CNNs per fold")->capture_default_str();
    sub->add_option("--mlp-ensemble", s.mlp, "perceptrons per CNN (0 disables the refinement stage)")
        ->capture_default_str();
    sub->add_option("--lr", s.hyper.lr0, "initial Adam learning rate")->capture_default_str();
    sub->add_option("--lr-drop", s.hyper.drop, "learning-rate factor per epoch")->capture_default_str();
    sub->add_option("--beta1", s.hyper.beta1, "Adam gradient decay")->capture_default_str();
    sub->add_option("--beta2", s.hyper.beta2, "Adam squared-gradient decay")->capture_default_str();
    sub->add_option("--epsilon", s.hyper.epsilon, "Adam epsilon")->capture_default_str();
    sub->add_option("--l2", s.hyper.l2, "L2 regularization")->capture_default_str();
    sub->add_option("--batch", s.hyper.batch, "segments per mini-batch")->capture_default_str();
    sub->add_option("--epochs", s.hyper.epochs, "training epochs per CNN")->capture_default_str();
    sub->add_option("--restart-r2", s.hyper.restart_r2, "retrain a CNN whose training R^2 stays below this")
        ->capture_default_str();
    sub->add_option("--max-restarts", s.hyper.max_restarts, "restart cap per CNN")->capture_default_str();
    sub->add_option("--resamples", s.resamples, "bootstrap resamples for confidence intervals")
        ->capture_default_str();
    sub->add_option("--seed", s.seed, "master seed")->capture_default_str();
    sub->add_option("--frame-stride", s.stride, "keep every n-th active frame")->capture_default_str();
    sub->add_flag("--dedupe-segments", s.dedupe, "train identical segments of short excerpts once");
    sub->add_flag("--keep-unconverged", s.keep_unconverged,
                  "continue when no CNN of a fold reaches the restart threshold");
    sub->add_option("--threads", s.threads, "worker threads for ensemble members")->capture_default_str();
    sub->add_option("--features", s.features, "feature groups for the perceptrons: all, cnn, or e.g. pt+sd")
        ->capture_default_str();
    sub->add_flag("-v,--verbose", s.verbose, "training log on stderr");
}

eval::ExperimentConfig experiment_config(const Sizing& s, const net::NetConfig& variant) {
    s.hyper.validate();
    if (s.threads == 0) throw UsageError("--threads must be positive");
    eval::ExperimentConfig c;
    c.ensemble.net = variant;
    c.ensemble.hyper = s.hyper;
    c.ensemble.n_cnn = s.cnn;
    c.ensemble.n_mlp = s.mlp;
    c.ensemble.feature_mask = feats::parse_mask(s.features);
    c.ensemble.dedupe_segments = s.dedupe;
    c.ensemble.threads = s.threads;
    c.n_runs = s.runs;
    c.folds = s.folds;
    c.bootstrap_resamples = s.resamples;
    c.seed = s.seed;
    c.abort_on_unconverged_fold = !s.keep_unconverged;
    return c;
}

std::vector<eval::PreparedExcerpt> prepare_all(const std::vector<dataio::ExcerptRecord>& records,
                                               const eval::PrepOptions& opt, std::ostream* log) {
    std::vector<eval::PreparedExcerpt> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(eval::load_and_prepare(r, opt));
        if (log) *log << "prepared " << r.id << " (" << out.back().active_frames << " active frames)\n";
    }
    return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(std::size_t n, const dataio::SynthRanges& ranges, std::uint64_t seed, const fs::path& out_dir,
              std::ostream& out) {
    make_dir(out_dir);
    std::vector<dataio::ExcerptRecord> records;
    for (std::size_t i = 0; i < n; ++i) {
        const auto spec = dataio::sample_synth_spec(ranges, i, seed);
        records.push_back(dataio::write_excerpt(out_dir, dataio::synth_excerpt(spec)));
    }
    const auto manifest = out_dir / "manifest.csv";
    dataio::write_manifest(manifest, records);
    out << "wrote " << n << " excerpts and " << manifest.string() << '\n';
    return kExitOk;
}

void write_stack(const fs::path& path, const eval::PreparedExcerpt& ex, std::size_t stride) {
    dataio::TensorHeader h;
    h.kind = dataio::TensorKind::scale_stack;
    h.dims = {ex.pitch.count(), prep::kSemitones, prep::kTimeScales};
    h.frame_period_s = dataio::kFramePeriod * static_cast<double>(stride);
    h.origin = static_cast<double>(ex.bounds.start);
    h.aux = static_cast<double>(ex.tuning_offset_cents);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    dataio::write_tensor(os, h, std::span<const float>(ex.pitch.values));
}

int cmd_prep(const fs::path& manifest, const fs::path& out_dir, std::size_t stride, bool stacks, std::ostream& out,
             std::ostream* log) {
    const auto records = dataio::load_manifest(manifest);
    make_dir(out_dir);
    eval::PrepOptions opt;
    opt.frame_stride = stride;
    std::ostringstream summary, features;
    summary << "id,start,end,active_frames,retained_frames,tuning_offset_cents\n";
    features << feats::feature_table_header() << '\n';
    for (const auto& r : records) {
        const auto ex = eval::load_and_prepare(r, opt);
        summary << r.id << ',' << ex.bounds.start << ',' << ex.bounds.end << ',' << ex.active_frames << ','
                << ex.pitch.count() << ',' << ex.tuning_offset_cents << '\n';
        // No model exists yet, so the cnn column is NA.
        std::string row = feats::feature_table_row(r.id, 0.0, ex.features);
        row.replace(r.id.size() + 1, 1, "NA");
        features << row << '\n';
        if (stacks) write_stack(out_dir / (r.id + ".stack"), ex, stride);
        if (log) *log << "prepared " << r.id << '\n';
    }
    write_text(out_dir / "prep.csv", summary.str());
    write_text(out_dir / "features.csv", features.str());
    out << "prepared " << records.size() << " excerpts into " << out_dir.string() << '\n';
    return kExitOk;
}

int cmd_train_eval(const fs::path& manifest, const fs::path& out_dir, const Sizing& s, const std::string& variant,
                   const std::string& save_models, std::ostream& out, std::ostream* log) {
    const auto v = net::parse_variant(variant);
    auto cfg = experiment_config(s, v);
    const auto records = dataio::load_manifest(manifest);
    make_dir(out_dir);
    eval::PrepOptions opt;
    opt.frame_stride = s.stride;
    opt.pitch = v.input == net::InputKind::pitch;
    opt.magnitude = v.input == net::InputKind::magnitude;
    opt.decibel = v.input == net::InputKind::decibel;
    opt.features = s.mlp > 0 || !save_models.empty();
    const auto data = prepare_all(records, opt, log);
    const auto report = eval::run_experiment(data, cfg, log);
    write_text(out_dir / "report.txt", report.text());
    write_text(out_dir / "predictions.csv", report.table());
    write_text(out_dir / "scatter.csv", report.scatter());
    out << report.text();
    if (!save_models.empty()) {
        std::vector<const eval::PreparedExcerpt*> all;
        for (const auto& ex : data) all.push_back(&ex);
        auto ens = eval::train_ensemble(all, cfg.ensemble, derive_seed(s.seed, {0xf1a1}), log);
        eval::save_ensemble_dir(save_models, ens);
        out << "saved " << ens.cnns.size() << " CNNs to " << save_models << '\n';
    }
    return kExitOk;
}

int cmd_predict(const fs::path& model_dir, const std::string& manifest, const std::string& pitch,
                const std::string& mag, const std::string& wdb, const std::string& id, std::size_t stride,
                const std::string& trace, std::ostream& out) {
    auto ens = eval::load_ensemble_dir(model_dir);
    std::vector<dataio::ExcerptRecord> records;
    if (!manifest.empty()) {
        records = dataio::load_manifest(manifest);
    } else {
        if (pitch.empty() || mag.empty()) throw UsageError("predict needs --manifest or --pitch and --mag");
        dataio::ExcerptRecord r;
        r.id = id.empty() ? fs::path(pitch).stem().string() : id;
        r.pitchogram_path = pitch;
        r.magnitude_path = mag;
        r.whitened_path = wdb;
        records.push_back(r);
    }
    const bool need_mlp = std::any_of(ens.mlps.begin(), ens.mlps.end(), [](const auto& m) { return !m.empty(); });
    eval::PrepOptions opt;
    opt.frame_stride = stride;
    opt.pitch = ens.config.input == net::InputKind::pitch;
    opt.magnitude = ens.config.input == net::InputKind::magnitude;
    opt.decibel = ens.config.input == net::InputKind::decibel;
    opt.features = need_mlp;
    std::ostringstream trace_text;
    trace_text.precision(17);
    if (!trace.empty()) trace_text << "id,frame,prediction\n";
    out << "id,ecnn,ecnn_emlp\n";
    out.precision(17);
    for (const auto& r : records) {
        const auto ex = eval::load_and_prepare(r, opt);
        const auto p = eval::predict_ensemble(ens, ex);
        out << r.id << ',' << p.ecnn << ',';
        if (p.emlp) out << *p.emlp;
        else out << "NA";
        out << '\n';
        if (!trace.empty()) {
            const auto& cols = ex.columns(ens.config.input);
            const auto in = net::gather_inputs(cols, 0, cols.count(), ens.config);
            std::vector<double> mean(cols.count(), 0.0);
            for (auto& cnn : ens.cnns) {
                const auto f = net::predict_frames(cnn, in);
                for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i] / static_cast<double>(ens.cnns.size());
            }
            for (std::size_t i = 0; i < mean.size(); ++i)
                trace_text << r.id << ',' << ex.bounds.start + cols.frame_index[i] << ',' << mean[i] << '\n';
        }
    }
    if (!trace.empty()) write_text(trace, trace_text.str());
    return kExitOk;
}

int cmd_ablate(const fs::path& manifest, const fs::path& out_dir, const Sizing& s,
               const std::vector<std::string>& variants, const std::vector<std::string>& masks, std::ostream& out,
               std::ostream* log) {
    ablate::AblationSpec spec;
    if (variants.empty()) spec = ablate::default_spec();
    for (const auto& v : variants) spec.variants.push_back(net::parse_variant(v));
    for (const auto& m : masks) spec.feature_masks.push_back(feats::parse_mask(m));
    auto cfg = experiment_config(s, net::NetConfig{});
    const auto records = dataio::load_manifest(manifest);
    make_dir(out_dir);
    eval::PrepOptions opt;
    opt.frame_stride = s.stride;
    opt.features = !spec.feature_masks.empty();
    for (const auto& v : spec.variants) {
        opt.magnitude = opt.magnitude || v.input == net::InputKind::magnitude;
        opt.decibel = opt.decibel || v.input == net::InputKind::decibel;
    }
    opt.features = opt.features || opt.decibel;
    const auto data = prepare_all(records, opt, log);
    const auto table = ablate::run_ablation(spec, data, cfg, log);
    write_text(out_dir / "ablation.csv", table.table());
    write_text(out_dir / "ablation_plot.csv", table.plot_data());
    out << table.table();
    return kExitOk;
}

// ---------------------------------------------------------------------------
// report: summaries from a prediction table and, optionally, listener ratings
// ---------------------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    return f;
}

double parse_number(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError(where + ": not a number: '" + s + "'");
    }
}

int cmd_report(const std::string& predictions, const std::string& ratings, const fs::path& out_dir,
               std::size_t resamples, std::size_t baseline_resamples, std::uint64_t seed, std::ostream& out) {
    if (predictions.empty() && ratings.empty()) throw UsageError("report needs --predictions and/or --ratings");
    make_dir(out_dir);
    std::ostringstream text;
    text << std::fixed << std::setprecision(4);
    if (!predictions.empty()) {
        std::ifstream is(predictions);
        if (!is) throw DataError("missing prediction table " + predictions);
        std::string line;
        std::getline(is, line);
        if (split_csv(line).size() != 7) throw DataError(predictions + ": unexpected header");
        std::map<std::size_t, std::vector<double>> truth, ecnn, emlp;
        bool has_mlp = true;
        std::size_t n = 1;
        while (std::getline(is, line)) {
            ++n;
            if (line.empty()) continue;
            const auto f = split_csv(line);
            const std::string where = predictions + ":" + std::to_string(n);
            if (f.size() != 7) throw DataError(where + ": expected 7 fields");
            const auto run = static_cast<std::size_t>(parse_number(f[0], where));
            truth[run].push_back(parse_number(f[4], where));
            ecnn[run].push_back(parse_number(f[5], where));
            if (f[6] == "NA") has_mlp = false;
            else emlp[run].push_back(parse_number(f[6], where));
        }
        if (truth.empty()) throw DataError(predictions + ": no predictions");
        auto summarize = [&](const char* name, std::map<std::size_t, std::vector<double>>& pred, std::uint64_t tag) {
            std::vector<double> r2;
            for (auto& [run, p] : pred) r2.push_back(eval::score(p, truth[run]).r2);
            double mean = 0.0;
            for (double v : r2) mean += v / static_cast<double>(r2.size());
            eval::Interval ci{mean, mean};
            if (r2.size() >= 2) {
                eval::BootstrapOptions b;
                b.resamples = resamples;
                b.draw_count = 0;
                b.seed = derive_seed(seed, {tag});
                ci = eval::bootstrap_ci(r2, b);
            }
            text << std::left << std::setw(12) << name << std::right << std::setw(9) << mean << std::setw(9) << ci.lo
                 << std::setw(9) << ci.hi << '\n';
        };
        text << std::left << std::setw(12) << "model" << std::right << std::setw(9) << "R2" << std::setw(9)
             << "CI_lo" << std::setw(9) << "CI_hi" << '\n';
        summarize("ECNN", ecnn, 1);
        if (has_mlp) summarize("ECNN+EMLP", emlp, 2);
        else text << std::left << std::setw(12) << "ECNN+EMLP" << std::right << std::setw(9) << "n/a" << '\n';
    }
    if (!ratings.empty()) {
        const auto m = dataio::load_ratings(ratings);
        text << "\nlisteners " << m.listeners << "  excerpts " << m.excerpts << "\nstandardized Cronbach alpha "
             << eval::cronbach_alpha_std(m) << '\n';
        std::ostringstream csv;
        csv.precision(10);
        csv << "listeners,mean_r2,ci_lo,ci_hi\n";
        eval::HumanBaselineOptions hb;
        hb.resamples = baseline_resamples;
        hb.seed = seed;
        for (std::size_t n = 1; n < m.listeners; ++n) {
            const auto b = eval::human_baseline(m, n, hb);
            csv << n << ',' << b.mean_r2 << ',' << b.lo << ',' << b.hi << '\n';
            text << "  " << n << " listener(s): R2 " << b.mean_r2 << " [" << b.lo << ", " << b.hi << "]\n";
        }
        write_text(out_dir / "human_baseline.csv", csv.str());
    }
    write_text(out_dir / "summary.txt", text.str());
    out << text.str();
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Minor/major modality prediction from pitch activations"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    std::string out_dir = default_out();
    auto add_out = [&](CLI::App* sub) {
        sub->add_option("-o,--out", out_dir, std::string("output directory (default: $") + kOutputDirEnv +
                                                 " or ./modality_out)");
    };

    // synth
    auto* synth = app.add_subcommand("synth", "synthesize excerpts and a manifest");
    std::size_t synth_n = 10;
    std::uint64_t synth_seed = 0;
    dataio::SynthRanges ranges;
    std::string synth_tag = "SYNTH";
    synth->add_option("-n,--count", synth_n, "number of excerpts")->capture_default_str();
    synth->add_option("--seed", synth_seed, "seed")->capture_default_str();
    synth->add_option("--chords-min", ranges.chords_min)->capture_default_str();
    synth->add_option("--chords-max", ranges.chords_max)->capture_default_str();
    synth->add_option("--chord-dur-min", ranges.chord_dur_min_s, "seconds")->capture_default_str();
    synth->add_option("--chord-dur-max", ranges.chord_dur_max_s, "seconds")->capture_default_str();
    synth->add_option("--vibrato-max", ranges.vibrato_max_cents, "cents")->capture_default_str();
    synth->add_option("--noise", ranges.noise_level)->capture_default_str();
    synth->add_option("--silence-max", ranges.silence_max_s, "lead/tail silence, seconds")->capture_default_str();
    synth->add_flag("--arpeggiate", ranges.arpeggiate, "play chord notes one after another");
    synth->add_option("--dataset", synth_tag, "dataset tag written to the manifest")->capture_default_str();
    synth->add_option("--prefix", ranges.prefix, "id prefix")->capture_default_str();
    add_out(synth);

    // prep
    auto* prep_cmd = app.add_subcommand("prep", "active bounds, tuning and global feature table");
    std::string manifest;
    std::size_t prep_stride = 1;
    bool prep_stacks = false;
    prep_cmd->add_option("-m,--manifest", manifest, "manifest CSV")->required();
    prep_cmd->add_flag("--write-stacks", prep_stacks, "also write the retained time-scale stacks as <id>.stack");
    prep_cmd->add_option("--frame-stride", prep_stride)->capture_default_str();
    add_out(prep_cmd);

    // train-eval
    auto* train = app.add_subcommand("train-eval", "cross-validated training and evaluation");
    Sizing sizing;
    std::string variant = "main", save_models;
    train->add_option("-m,--manifest", manifest, "manifest CSV")->required();
    train->add_option("--variant", variant, "network variant, e.g. main, pool=avg, ts=811, input=mag")
        ->capture_default_str();
    train->add_option("--save-models", save_models, "also train on all excerpts and save the ensemble here");
    add_sizing(train, sizing);
    add_out(train);

    // predict
    auto* predict = app.add_subcommand("predict", "predict excerpts with a saved ensemble");
    std::string models, pitch, mag, wdb, pid, trace;
    std::size_t pred_stride = 1;
    predict->add_option("--models", models, "ensemble directory from train-eval --save-models")->required();
    predict->add_option("-m,--manifest", manifest, "manifest CSV");
    predict->add_option("--pitch", pitch, "pitchogram tensor");
    predict->add_option("--mag", mag, "magnitude spectrogram tensor");
    predict->add_option("--wdb", wdb, "whitened dB spectrogram tensor");
    predict->add_option("--id", pid, "excerpt id for single-file prediction");
    predict->add_option("--frame-stride", pred_stride)->capture_default_str();
    predict->add_option("--trace", trace, "per-frame prediction CSV");

    // ablate
    auto* abl = app.add_subcommand("ablate", "variant and feature-group ablations");
    std::vector<std::string> variants, masks;
    abl->add_option("-m,--manifest", manifest, "manifest CSV")->required();
    abl->add_option("--variants", variants, "variants (default: every single-change variant)");
    abl->add_option("--feature-masks", masks, "feature masks, e.g. all cnn+pt pt+vs+ve");
    add_sizing(abl, sizing);
    add_out(abl);

    // report
    auto* rep = app.add_subcommand("report", "summaries from prediction tables and listener ratings");
    std::string predictions, ratings;
    std::size_t rep_resamples = 1'000'000, baseline_resamples = 100'000;
    std::uint64_t rep_seed = 0;
    rep->add_option("--predictions", predictions, "predictions.csv from train-eval");
    rep->add_option("--ratings", ratings, "listener x excerpt ratings CSV");
    rep->add_option("--resamples", rep_resamples, "bootstrap resamples over runs")->capture_default_str();
    rep->add_option("--baseline-resamples", baseline_resamples, "listener resamples")->capture_default_str();
    rep->add_option("--seed", rep_seed)->capture_default_str();
    add_out(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    std::ostream* log = sizing.verbose ? &err : nullptr;
    try {
        if (*synth) {
            ranges.dataset = dataio::parse_dataset_tag(synth_tag);
            return cmd_synth(synth_n, ranges, synth_seed, out_dir, out);
        }
        if (*prep_cmd) return cmd_prep(manifest, out_dir, prep_stride, prep_stacks, out, nullptr);
        if (*train) return cmd_train_eval(manifest, out_dir, sizing, variant, save_models, out, log);
        if (*predict) return cmd_predict(models, manifest, pitch, mag, wdb, pid, pred_stride, trace, out);
        if (*abl) return cmd_ablate(manifest, out_dir, sizing, variants, masks, out, log);
        if (*rep) return cmd_report(predictions, ratings, out_dir, rep_resamples, baseline_resamples, rep_seed, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    }
    return kExitUsage;
}

}  // namespace modality::cli
