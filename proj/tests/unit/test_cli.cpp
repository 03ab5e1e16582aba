#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const char* kConfig = R"({
  "seed": 3,
  "synth": {"days": 4, "sigma": 5.0},
  "data": {"gridded_csv": "synth/series.csv", "split": {"train_days": 2, "valid_days": 1, "test_days": 1}},
  "fit": {"latent_dim": 2, "max_iterations": 15, "patience": 50},
  "conditioning": {"iterations": 10},
  "forecast": {"n_anchors": 1, "horizon": 12, "samples": 10},
  "evaluate": {"horizons": [6, 12], "n_anchors": 3, "samples": 10,
               "models": ["dtd_sim", "naive", "static_window", "arma"], "arma": {"max_p": 1, "max_q": 1}},
  "counterfactual": {"n_anchors": 1, "samples": 10},
  "simulate": {"duration_minutes": 120, "events": [{"offset_minutes": 10, "carbs_g": 30, "bolus_u": 3}]}
})";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Workspace {
    fs::path dir;
    explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / name) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "run.json") << kConfig;
    }
    ~Workspace() { fs::remove_all(dir); }

    int run(const std::string& args) const {
        const std::string cmd = "cd '" + dir.string() + "' && '" DTDSIM_CLI_PATH "' " + args + " 2>>'" +
                                (dir / "stderr.log").string() + "'";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
};

void pipeline(const Workspace& w, const std::string& suffix) {
    const std::string ck = " --checkpoint fit" + suffix + "/checkpoint.json";
    REQUIRE(w.run("synth --config run.json --out synth") == 0);
    REQUIRE(w.run("fit --config run.json --out fit" + suffix) == 0);
    REQUIRE(w.run("forecast --config run.json --out fc" + suffix + ck) == 0);
    REQUIRE(w.run("evaluate --config run.json --out ev" + suffix + ck) == 0);
    REQUIRE(w.run("counterfactual --config run.json --out cf" + suffix + ck) == 0);
    REQUIRE(w.run("simulate --config run.json --out sim" + suffix) == 0);
}

}  // namespace

TEST_CASE("pipeline reruns are byte-identical") {
    Workspace w("dtdsim_cli_pipeline");
    pipeline(w, "_a");
    const std::string series = slurp(w.dir / "synth" / "series.csv");
    REQUIRE(w.run("synth --config run.json --out synth") == 0);
    CHECK(slurp(w.dir / "synth" / "series.csv") == series);
    pipeline(w, "_b");

    int compared = 0;
    for (const auto& stage : {"fit", "fc", "ev", "cf", "sim"}) {
        for (const auto& e : fs::directory_iterator(w.dir / (std::string(stage) + "_a"))) {
            if (e.path().extension() != ".csv") continue;
            const fs::path other = w.dir / (std::string(stage) + "_b") / e.path().filename();
            REQUIRE(fs::exists(other));
            CHECK_MESSAGE(slurp(e.path()) == slurp(other), e.path().string());
            ++compared;
        }
    }
    CHECK(compared >= 8);

    const auto info = nlohmann::json::parse(slurp(w.dir / "fit_a" / "run_info.json"));
    CHECK(info.at("command") == "fit");
    CHECK(info.at("seed") == 3);
    const auto resolved = nlohmann::json::parse(slurp(w.dir / "fit_a" / "resolved_config.json"));
    CHECK(resolved.at("fit").at("max_iterations") == 15);

    // A different seed changes the synthetic data.
    REQUIRE(w.run("synth --config run.json --seed 4 --out synth4") == 0);
    CHECK(slurp(w.dir / "synth4" / "series.csv") != series);
}

TEST_CASE("failures produce a JSON error record and a nonzero exit") {
    Workspace w("dtdsim_cli_errors");
    std::ofstream(w.dir / "bad.json") << R"({"seed": 1, "fitt": {}})";
    CHECK(w.run("synth --config bad.json --out bad") == 1);
    const auto rec = nlohmann::json::parse(slurp(w.dir / "bad" / "error.json"));
    CHECK(rec.at("error") == "config");
    CHECK(rec.at("command") == "synth");

    std::ofstream(w.dir / "broken.json") << "{ not json";
    CHECK(w.run("synth --config broken.json --out broken") == 1);

    REQUIRE(w.run("synth --config run.json --out synth") == 0);
    CHECK(w.run("forecast --config run.json --out nockpt") == 1);
    CHECK(nlohmann::json::parse(slurp(w.dir / "nockpt" / "error.json")).at("error") == "config");

    CHECK(w.run("simulate --config " DTDSIM_CONFIG_DIR "/example_run.json --out ex") == 0);
    CHECK(fs::exists(w.dir / "ex" / "simulation.csv"));
}
