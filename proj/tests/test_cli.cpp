#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "modality/cli.hpp"
#include "modality/dataio.hpp"
#include "modality/prep.hpp"
#include "support.hpp"

using namespace modality;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "modality");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Result r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Runs the installed binary through the shell and returns its exit status.
int run_binary(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " \"" MODALITY_CLI_PATH "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ext) ++n;
    return n;
}

std::vector<std::string> small_synth(const fs::path& dir, std::size_t n, std::uint64_t seed) {
    return {"synth", "-n", std::to_string(n), "--seed", std::to_string(seed), "--chords-min", "3", "--chords-max",
            "4", "--chord-dur-min", "0.5", "--chord-dur-max", "0.6", "--silence-max", "0.2", "-o", dir.string()};
}

}  // namespace

TEST_CASE("synth writes three tensors per excerpt and a manifest") {
    testsupport::TempDir dir("cli_synth");
    const auto r = run(small_synth(dir.path(), 10, 4));
    REQUIRE(r.code == cli::kExitOk);
    CHECK(count_ext(dir.path(), ".pitch") == 10);
    CHECK(count_ext(dir.path(), ".mag") == 10);
    CHECK(count_ext(dir.path(), ".wdb") == 10);
    const auto records = dataio::load_manifest(dir / "manifest.csv");
    CHECK(records.size() == 10);
    for (const auto& rec : records) {
        CHECK(rec.rating >= 1.0);
        CHECK(rec.rating <= 10.0);
        CHECK(rec.dataset == dataio::DatasetTag::SYNTH);
    }
}

TEST_CASE("synth with the same seed writes identical files") {
    testsupport::TempDir a("cli_same_a"), b("cli_same_b");
    REQUIRE(run(small_synth(a.path(), 3, 9)).code == 0);
    REQUIRE(run(small_synth(b.path(), 3, 9)).code == 0);
    for (const auto& e : fs::directory_iterator(a.path())) {
        if (e.path().filename() == "manifest.csv") continue;
        CHECK(slurp(e.path()) == slurp(b / e.path().filename().string()));
    }
    const auto ra = dataio::load_manifest(a / "manifest.csv");
    const auto rb = dataio::load_manifest(b / "manifest.csv");
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].id == rb[i].id);
        CHECK(ra[i].rating == rb[i].rating);
    }
}

TEST_CASE("synth of zero excerpts writes an empty manifest") {
    testsupport::TempDir dir("cli_zero");
    const auto r = run({"synth", "-n", "0", "-o", dir.path().string()});
    CHECK(r.code == cli::kExitOk);
    CHECK(dataio::load_manifest(dir / "manifest.csv").empty());
}

TEST_CASE("output directory defaults to the environment variable") {
    testsupport::TempDir dir("cli_env");
    const auto target = dir / "from_env";
    CHECK(run_binary("synth -n 1", "MODALITY_OUTPUT_DIR=\"" + target.string() + "\"") == 0);
    CHECK(fs::exists(target / "manifest.csv"));
    CHECK(count_ext(target, ".pitch") == 1);
}

TEST_CASE("prep writes bounds, tuning, features and optional stacks") {
    testsupport::TempDir dir("cli_prep");
    REQUIRE(run(small_synth(dir / "data", 3, 5)).code == 0);
    const auto r = run({"prep", "-m", (dir / "data" / "manifest.csv").string(), "--write-stacks", "--frame-stride",
                        "4", "-o", (dir / "prep").string()});
    REQUIRE(r.code == cli::kExitOk);
    std::istringstream summary(slurp(dir / "prep" / "prep.csv"));
    std::string line;
    std::getline(summary, line);
    CHECK(line == "id,start,end,active_frames,retained_frames,tuning_offset_cents");
    std::size_t rows = 0;
    while (std::getline(summary, line)) ++rows;
    CHECK(rows == 3);
    const auto features = slurp(dir / "prep" / "features.csv");
    CHECK(features.find(",NA,") != std::string::npos);
    CHECK(count_ext(dir / "prep", ".stack") == 3);
    const auto h = dataio::read_header(dir / "prep" / "synth0.stack");
    CHECK(h.kind == dataio::TensorKind::scale_stack);
    CHECK(h.dims.size() == 3);
    CHECK(h.dims[1] == prep::kSemitones);
    CHECK(h.dims[2] == prep::kTimeScales);
}

TEST_CASE("data problems exit with code 2") {
    testsupport::TempDir dir("cli_data");
    const auto missing = (dir / "nope.csv").string();
    CHECK(run({"train-eval", "-m", missing, "-o", dir.path().string()}).code == cli::kExitData);
    CHECK(run_binary("train-eval -m \"" + missing + "\" -o \"" + dir.path().string() + "\"") == cli::kExitData);

    REQUIRE(run(small_synth(dir / "data", 2, 6)).code == 0);
    const auto pitch = dir / "data" / "synth1.pitch";
    const auto size = fs::file_size(pitch);
    fs::resize_file(pitch, size - 100);
    const auto r = run({"prep", "-m", (dir / "data" / "manifest.csv").string(), "-o", (dir / "prep").string()});
    CHECK(r.code == cli::kExitData);
    CHECK(r.err.find("data error") != std::string::npos);
    CHECK(run_binary("prep -m \"" + (dir / "data" / "manifest.csv").string() + "\" -o \"" +
                     (dir / "prep").string() + "\"") == cli::kExitData);
}

TEST_CASE("usage problems exit with code 1") {
    testsupport::TempDir dir("cli_usage");
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"dance"}).code == cli::kExitUsage);
    CHECK(run({"synth", "--count", "many"}).code == cli::kExitUsage);
    CHECK(run({"train-eval"}).code == cli::kExitUsage);
    CHECK(run({"report", "-o", dir.path().string()}).code == cli::kExitUsage);
    REQUIRE(run(small_synth(dir / "data", 2, 7)).code == 0);
    const auto m = (dir / "data" / "manifest.csv").string();
    CHECK(run({"train-eval", "-m", m, "--variant", "pool=median", "-o", dir.path().string()}).code ==
          cli::kExitUsage);
    CHECK(run({"train-eval", "-m", m, "--lr=-1", "-o", dir.path().string()}).code == cli::kExitUsage);
    CHECK(run_binary("--no-such-flag") == cli::kExitUsage);
    const auto help = run({"--help"});
    CHECK(help.code == cli::kExitOk);
    CHECK(help.out.find("train-eval") != std::string::npos);
}

TEST_CASE("a fold without a converged CNN exits with code 3") {
    testsupport::TempDir dir("cli_num");
    REQUIRE(run(small_synth(dir / "data", 6, 8)).code == 0);
    const auto r = run({"train-eval", "-m", (dir / "data" / "manifest.csv").string(), "--runs", "1", "--folds", "2",
                        "--cnn-ensemble", "1", "--mlp-ensemble", "0", "--epochs", "1", "--frame-stride", "16",
                        "--restart-r2", "1.5", "--max-restarts", "0", "-o", (dir / "out").string()});
    CHECK(r.code == cli::kExitNumerical);
    CHECK(r.err.find("no CNN reached") != std::string::npos);
}

TEST_CASE("train-eval, predict and report end to end") {
    testsupport::TempDir dir("cli_e2e");
    const auto data = dir / "data";
    REQUIRE(run(small_synth(data, 24, 11)).code == 0);
    const auto manifest = (data / "manifest.csv").string();
    const std::vector<std::string> sizing{"--runs", "2", "--folds", "3", "--batch", "4", "--frame-stride", "16",
                                          "--dedupe-segments", "--keep-unconverged", "--resamples", "200",
                                          "--seed", "3"};

    auto args = std::vector<std::string>{"train-eval", "-m", manifest, "-o", (dir / "full").string(),
                                         "--save-models", (dir / "models").string(), "--cnn-ensemble", "2",
                                         "--mlp-ensemble", "2"};
    args.insert(args.end(), sizing.begin(), sizing.end());
    const auto full = run(args);
    REQUIRE_MESSAGE(full.code == cli::kExitOk, full.err);
    const auto report = slurp(dir / "full" / "report.txt");
    CHECK(report.find("\nECNN ") != std::string::npos);
    CHECK(report.find("\nECNN+EMLP ") != std::string::npos);
    CHECK(report.find("ECNN+EMLP         n/a") == std::string::npos);
    CHECK(fs::exists(dir / "full" / "predictions.csv"));
    CHECK(slurp(dir / "full" / "scatter.csv").rfind("id,dataset,rating,prediction,prediction_emlp\n", 0) == 0);
    CHECK(fs::exists(dir / "models" / "ensemble.json"));

    // ECNN only
    args = {"train-eval", "-m", manifest, "-o", (dir / "ecnn").string()};
    args.insert(args.end(), sizing.begin(), sizing.end());
    args.insert(args.end(), {"--cnn-ensemble", "1", "--mlp-ensemble", "0"});
    const auto ecnn = run(args);
    REQUIRE(ecnn.code == cli::kExitOk);
    CHECK(ecnn.out.find("\nECNN ") != std::string::npos);
    CHECK(ecnn.out.find("ECNN+EMLP         n/a") != std::string::npos);

    // Pure major versus pure minor on the saved ensemble.
    const auto records = dataio::load_manifest(manifest);
    double mean_rating = 0.0;
    for (const auto& r : records) mean_rating += r.rating / static_cast<double>(records.size());
    dataio::SynthSpec major;
    major.id = "allmajor";
    major.major_fraction = 1.0;
    major.n_chords = 4;
    major.chord_dur_s = 0.55;
    major.key_class = 3;
    major.seed = 77;
    dataio::SynthSpec minor = major;
    minor.id = "allminor";
    minor.major_fraction = 0.0;
    const auto major_rec = dataio::write_excerpt(dir / "probe", dataio::synth_excerpt(major));
    const auto minor_rec = dataio::write_excerpt(dir / "probe", dataio::synth_excerpt(minor));
    dataio::write_manifest(dir / "probe" / "manifest.csv", {major_rec, minor_rec});

    const std::vector<std::string> predict{"predict", "--models", (dir / "models").string(), "-m",
                                           (dir / "probe" / "manifest.csv").string(), "--frame-stride", "16",
                                           "--trace", (dir / "trace.csv").string()};
    const auto p1 = run(predict);
    const auto p2 = run(predict);
    REQUIRE(p1.code == cli::kExitOk);
    CHECK(p1.out == p2.out);
    std::istringstream lines(p1.out);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "id,ecnn,ecnn_emlp");
    std::map<std::string, double> ecnn_pred;
    while (std::getline(lines, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        ecnn_pred[line.substr(0, c1)] = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
        CHECK(line.substr(c2 + 1) != "NA");
    }
    CHECK(ecnn_pred.at("allmajor") > mean_rating);
    CHECK(ecnn_pred.at("allmajor") > ecnn_pred.at("allminor"));
    CHECK(slurp(dir / "trace.csv").rfind("id,frame,prediction\nallmajor,", 0) == 0);

    const auto single = run({"predict", "--models", (dir / "models").string(), "--pitch", major_rec.pitchogram_path,
                             "--mag", major_rec.magnitude_path, "--wdb", major_rec.whitened_path, "--frame-stride",
                             "16"});
    REQUIRE(single.code == cli::kExitOk);
    CHECK(single.out.find("\nallmajor,") != std::string::npos);

    // Frame-count mismatch between pitchogram and spectrogram.
    const auto mismatch = run({"predict", "--models", (dir / "models").string(), "--pitch",
                               major_rec.pitchogram_path, "--mag", records[0].magnitude_path, "--wdb",
                               records[0].whitened_path});
    CHECK(mismatch.code == cli::kExitData);

    // Summaries from the prediction table and from listener ratings.
    {
        std::ofstream os(dir / "ratings.csv");
        os << "2,5,7,9,3,6\n3,5,8,9,2,6\n2,4,7,8,3,7\n1,5,6,9,3,5\n";
    }
    const auto rep = run({"report", "--predictions", (dir / "full" / "predictions.csv").string(), "--ratings",
                          (dir / "ratings.csv").string(), "--resamples", "500", "--baseline-resamples", "500", "-o",
                          (dir / "report").string()});
    REQUIRE_MESSAGE(rep.code == cli::kExitOk, rep.err);
    CHECK(rep.out.find("ECNN ") != std::string::npos);
    CHECK(rep.out.find("ECNN+EMLP") != std::string::npos);
    CHECK(rep.out.find("standardized Cronbach alpha") != std::string::npos);
    const auto baseline = slurp(dir / "report" / "human_baseline.csv");
    CHECK(baseline.rfind("listeners,mean_r2,ci_lo,ci_hi\n1,", 0) == 0);
    CHECK(baseline.find("\n3,") != std::string::npos);
    CHECK(run({"report", "--predictions", (dir / "missing.csv").string(), "-o", (dir / "report").string()}).code ==
          cli::kExitData);
}

TEST_CASE("ablate writes a table and plot data") {
    testsupport::TempDir dir("cli_ablate");
    REQUIRE(run(small_synth(dir / "data", 8, 12)).code == 0);
    const auto r = run({"ablate", "-m", (dir / "data" / "manifest.csv").string(), "--variants", "pool=avg",
                        "input=mag", "--runs", "1", "--folds", "2", "--cnn-ensemble", "1", "--mlp-ensemble", "0",
                        "--epochs", "1", "--frame-stride", "16", "--keep-unconverged", "--resamples", "100", "-o",
                        (dir / "out").string()});
    REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
    const auto table = slurp(dir / "out" / "ablation.csv");
    CHECK(table.find("\nmain,cnn,") != std::string::npos);
    CHECK(table.find("\npool=avg,cnn,") != std::string::npos);
    CHECK(table.find("\ninput=mag,cnn,") != std::string::npos);
    CHECK(fs::exists(dir / "out" / "ablation_plot.csv"));
}
