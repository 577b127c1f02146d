#include "modality/ablate.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>

#include "modality/error.hpp"
#include "modality/random.hpp"

namespace modality::ablate {

using net::NetConfig;

AblationSpec default_spec() {
    AblationSpec s;
    s.variants.push_back(NetConfig{});
    for (int slot = 0; slot < static_cast<int>(prep::kTimeScales); ++slot) {
        NetConfig c;
        c.timescale_slot = slot;
        s.variants.push_back(c);
    }
    for (auto p : {net::Pooling::avg, net::Pooling::fully_conv}) {
        NetConfig c;
        c.pooling = p;
        s.variants.push_back(c);
    }
    for (auto k : {net::InputKind::magnitude, net::InputKind::decibel}) {
        NetConfig c;
        c.input = k;
        s.variants.push_back(c);
    }
    NetConfig mean;
    mean.chroma = net::ChromaMode::mean_octave;
    s.variants.push_back(mean);
    return s;
}

bool input_available(const std::vector<eval::PreparedExcerpt>& dataset, net::InputKind kind) {
    for (const auto& ex : dataset) {
        try {
            ex.columns(kind);
        } catch (const DataError&) {
            return false;
        }
    }
    return !dataset.empty();
}

namespace {

bool is_invariant(const NetConfig& c, std::uint64_t seed) {
    auto m = net::build_net(c, seed);
    return net::key_class_invariance(m, 10, seed).max_relative_deviation < 1e-6;
}

}  // namespace

AblationTable run_ablation(const AblationSpec& spec, const std::vector<eval::PreparedExcerpt>& dataset,
                           const eval::ExperimentConfig& base, std::ostream* log) {
    std::vector<NetConfig> variants = spec.variants;
    const auto main_it = std::find_if(variants.begin(), variants.end(), [](const auto& c) { return c.is_main(); });
    if (main_it == variants.end()) variants.insert(variants.begin(), NetConfig{});
    else std::rotate(variants.begin(), main_it, main_it + 1);

    std::vector<dataio::DatasetTag> tags;
    for (const auto& ex : dataset) tags.push_back(ex.record.dataset);
    std::vector<eval::FoldPlan> plans;
    for (std::size_t r = 0; r < base.n_runs; ++r)
        plans.push_back(eval::stratified_folds(tags, base.folds, derive_seed(base.seed, {r})));
    std::uint64_t plan_print = 0;
    for (const auto& p : plans) plan_print = splitmix64(plan_print ^ p.fingerprint());

    auto config_for = [&](const NetConfig& c, std::size_t n_mlp, unsigned mask) {
        eval::ExperimentConfig cfg = base;
        cfg.ensemble.net = c;
        cfg.ensemble.n_mlp = n_mlp;
        cfg.ensemble.feature_mask = mask;
        if (spec.shared_plans) cfg.plans = &plans;
        return cfg;
    };
    auto plans_print_of = [&](const eval::ExperimentReport& rep) {
        std::uint64_t h = 0;
        for (const auto& p : rep.plans) h = splitmix64(h ^ p.fingerprint());
        return h;
    };

    AblationTable table;
    const bool need_mlp = !spec.feature_masks.empty();
    const std::size_t main_mlp = need_mlp ? std::max<std::size_t>(base.ensemble.n_mlp, 1) : 0;
    if (log) *log << "ablation: main\n";
    const auto main_report = eval::run_experiment(dataset, config_for(NetConfig{}, main_mlp, feats::kAllGroups), log);
    const double main_r2 = main_report.ecnn.mean;
    const double main_mlp_r2 = main_report.emlp ? main_report.emlp->mean : 0.0;

    for (const auto& c : variants) {
        AblationRow row;
        row.label = c.label();
        row.kind = "cnn";
        row.invariant = is_invariant(c, base.seed);
        if (!input_available(dataset, c.input)) {
            row.skipped = true;
            row.notice = "input kind not prepared";
            if (log) *log << "ablation: skipping " << row.label << " (" << row.notice << ")\n";
            table.rows.push_back(row);
            continue;
        }
        const eval::ExperimentReport* rep = &main_report;
        eval::ExperimentReport own;
        if (!c.is_main()) {
            if (log) *log << "ablation: " << row.label << '\n';
            try {
                own = eval::run_experiment(dataset, config_for(c, 0, feats::kAllGroups), log);
            } catch (const NumericalError& e) {
                row.skipped = true;
                row.notice = e.what();
                table.rows.push_back(row);
                continue;
            }
            rep = &own;
        }
        row.r2 = rep->ecnn.mean;
        row.delta = c.is_main() ? 0.0 : row.r2 - main_r2;
        row.ci_half_width = (rep->ecnn.ci.hi - rep->ecnn.ci.lo) / 2.0;
        row.plan_fingerprint = spec.shared_plans ? plans_print_of(*rep) : 0;
        if (spec.shared_plans && row.plan_fingerprint != plan_print)
            throw UsageError("ablation: variant " + row.label + " did not use the shared fold plans");
        table.rows.push_back(row);
    }

    for (unsigned mask : spec.feature_masks) {
        AblationRow row;
        row.label = feats::mask_label(mask);
        row.kind = "features";
        row.invariant = true;
        const eval::ExperimentReport* rep = &main_report;
        eval::ExperimentReport own;
        if (mask != feats::kAllGroups) {
            if (log) *log << "ablation: features " << row.label << '\n';
            own = eval::run_experiment(dataset, config_for(NetConfig{}, main_mlp, mask), log);
            rep = &own;
        }
        row.r2 = rep->emlp->mean;
        row.delta = mask == feats::kAllGroups ? 0.0 : row.r2 - main_mlp_r2;
        row.ci_half_width = (rep->emlp->ci.hi - rep->emlp->ci.lo) / 2.0;
        row.plan_fingerprint = spec.shared_plans ? plans_print_of(*rep) : 0;
        table.rows.push_back(row);
    }
    return table;
}

std::string AblationTable::table() const {
    std::ostringstream os;
    os.precision(6);
    os << "label,kind,r2,delta_r2,ci_half_width,invariant,status\n";
    for (const auto& r : rows) {
        os << r.label << ',' << r.kind << ',';
        if (r.skipped) {
            os << "NA,NA,NA," << (r.invariant ? "yes" : "no") << ",skipped: " << r.notice << '\n';
            continue;
        }
        os << r.r2 << ',' << r.delta << ',' << r.ci_half_width << ',' << (r.invariant ? "yes" : "no") << ",ok\n";
    }
    return os.str();
}

std::string AblationTable::plot_data() const {
    std::ostringstream os;
    os.precision(6);
    os << "label,delta_r2,ci_half_width\n";
    for (const auto& r : rows)
        if (!r.skipped) os << r.label << ',' << r.delta << ',' << r.ci_half_width << '\n';
    return os.str();
}

}  // namespace modality::ablate
