#include "doctest.h"

#include <set>
#include <sstream>

#include "modality/ablate.hpp"
#include "modality/error.hpp"
#include "modality/random.hpp"

using namespace modality;
using namespace modality::ablate;
using net::NetConfig;
using net::parse_variant;

namespace {

std::vector<eval::PreparedExcerpt> tiny_set(bool magnitude, bool features) {
    eval::PrepOptions o;
    o.frame_stride = 16;
    o.magnitude = magnitude;
    o.features = features;
    std::vector<eval::PreparedExcerpt> out;
    for (std::size_t i = 0; i < 8; ++i) {
        dataio::SynthSpec s;
        s.id = "a" + std::to_string(i);
        s.key_class = static_cast<int>(i * 7 % 12);
        s.major_fraction = static_cast<double>(i % 4) / 3.0;
        s.n_chords = 3;
        s.chord_dur_s = 0.5;
        s.seed = derive_seed(21, {i});
        out.push_back(eval::prepare_excerpt(dataio::synth_excerpt(s), o));
    }
    return out;
}

eval::ExperimentConfig tiny_config() {
    eval::ExperimentConfig c;
    c.n_runs = 2;
    c.folds = 4;
    c.ensemble.n_cnn = 1;
    c.ensemble.n_mlp = 0;
    c.ensemble.hyper.epochs = 1;
    c.ensemble.hyper.batch = 2;
    c.ensemble.hyper.restart_r2 = 0.0;
    c.ensemble.dedupe_segments = true;
    c.ensemble.lm.epochs = 1;
    c.bootstrap_resamples = 500;
    c.seed = 3;
    return c;
}

const AblationRow& row(const AblationTable& t, const std::string& label) {
    for (const auto& r : t.rows)
        if (r.label == label) return r;
    FAIL("no row " << label);
    return t.rows.front();
}

}  // namespace

TEST_CASE("default ablation covers every single-change variant") {
    const auto spec = default_spec();
    std::set<std::string> labels;
    for (const auto& v : spec.variants) labels.insert(v.label());
    const std::set<std::string> expected{"main",     "ts=none",  "ts=31",     "ts=91",     "ts=271", "ts=811",
                                         "ts=2431",  "pool=avg", "pool=conv", "input=mag", "input=db", "pc=mean"};
    CHECK(labels == expected);
    CHECK(spec.shared_plans);
}

TEST_CASE("main alone gives one row with zero difference") {
    const auto data = tiny_set(false, false);
    AblationSpec spec;
    spec.variants = {NetConfig{}};
    const auto t = run_ablation(spec, data, tiny_config());
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].label == "main");
    CHECK(t.rows[0].delta == 0.0);
    CHECK(t.rows[0].invariant);
    CHECK_FALSE(t.rows[0].skipped);
}

TEST_CASE("pooling variants share fold plans; avg stays invariant, conv does not") {
    const auto data = tiny_set(false, false);
    AblationSpec spec;
    spec.variants = {parse_variant("pool=avg"), parse_variant("pool=conv")};
    std::ostringstream log;
    const auto t = run_ablation(spec, data, tiny_config(), &log);
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].label == "main");
    const auto& avg = row(t, "pool=avg");
    const auto& conv = row(t, "pool=conv");
    CHECK(avg.invariant);
    CHECK_FALSE(conv.invariant);
    CHECK(avg.delta == doctest::Approx(avg.r2 - t.rows[0].r2).epsilon(1e-12));
    CHECK(conv.delta == doctest::Approx(conv.r2 - t.rows[0].r2).epsilon(1e-12));
    CHECK(avg.plan_fingerprint == t.rows[0].plan_fingerprint);
    CHECK(conv.plan_fingerprint == t.rows[0].plan_fingerprint);
    CHECK(log.str().find("ablation: pool=avg") != std::string::npos);

    const auto table = t.table();
    CHECK(table.rfind("label,kind,r2,delta_r2,ci_half_width,invariant,status\n", 0) == 0);
    CHECK(table.find("pool=conv,cnn,") != std::string::npos);
    CHECK(table.find(",no,ok") != std::string::npos);
    CHECK(t.plot_data().rfind("label,delta_r2,ci_half_width\nmain,0,", 0) == 0);
}

TEST_CASE("main listed later is still evaluated first") {
    const auto data = tiny_set(false, false);
    AblationSpec spec;
    spec.variants = {parse_variant("ts=811"), NetConfig{}};
    const auto t = run_ablation(spec, data, tiny_config());
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].label == "main");
    CHECK(t.rows[1].label == "ts=811");
    CHECK(t.rows[1].invariant);
}

TEST_CASE("variants needing an unprepared input are skipped with a notice") {
    const auto pitch_only = tiny_set(false, false);
    CHECK(input_available(pitch_only, net::InputKind::pitch));
    CHECK_FALSE(input_available(pitch_only, net::InputKind::magnitude));
    CHECK_FALSE(input_available({}, net::InputKind::pitch));

    AblationSpec spec;
    spec.variants = {parse_variant("input=mag")};
    std::ostringstream log;
    const auto t = run_ablation(spec, pitch_only, tiny_config(), &log);
    const auto& mag = row(t, "input=mag");
    CHECK(mag.skipped);
    CHECK(mag.notice == "input kind not prepared");
    CHECK(log.str().find("skipping input=mag") != std::string::npos);
    CHECK(t.table().find("input=mag,cnn,NA,NA,NA,yes,skipped: input kind not prepared") != std::string::npos);
    CHECK(t.plot_data().find("input=mag") == std::string::npos);

    const auto with_mag = tiny_set(true, false);
    const auto t2 = run_ablation(spec, with_mag, tiny_config());
    CHECK_FALSE(row(t2, "input=mag").skipped);
}

TEST_CASE("feature-group masks are scored against the full perceptron stage") {
    const auto data = tiny_set(false, true);
    AblationSpec spec;
    spec.variants = {NetConfig{}};
    spec.feature_masks = {feats::kAllGroups, feats::parse_mask("cnn"), feats::parse_mask("pt+sd")};
    auto cfg = tiny_config();
    cfg.ensemble.n_mlp = 2;
    const auto t = run_ablation(spec, data, cfg);
    REQUIRE(t.rows.size() == 4);
    const auto& all = row(t, feats::mask_label(feats::kAllGroups));
    CHECK(all.kind == "features");
    CHECK(all.delta == 0.0);
    const auto& cnn_only = row(t, feats::mask_label(feats::parse_mask("cnn")));
    CHECK(cnn_only.delta == doctest::Approx(cnn_only.r2 - all.r2).epsilon(1e-12));
    CHECK(cnn_only.plan_fingerprint == all.plan_fingerprint);
}
