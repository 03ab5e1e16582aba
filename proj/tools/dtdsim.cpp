// Batch entry points: synth, fit, forecast, evaluate, counterfactual,
// simulate. Every run writes resolved_config.json and run_info.json into the
// output directory; failures print a JSON error record and exit nonzero.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "dtdsim/baselines.hpp"
#include "dtdsim/data_io.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/eval_metrics.hpp"
#include "dtdsim/forecast.hpp"
#include "dtdsim/inference.hpp"
#include "dtdsim/physio_sim.hpp"
#include "dtdsim/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtdsim;

namespace {

const std::vector<std::string> kSections{"seed",     "params",     "data",           "synth",   "fit",
                                         "conditioning", "forecast", "evaluate", "counterfactual", "simulate"};

struct Run {
    std::string command;
    json config = json::object();
    json resolved = json::object();
    fs::path config_dir = ".";
    fs::path out = "out";
    std::optional<fs::path> checkpoint;
    std::uint64_t seed = 0;
};

json section(const Run& r, const std::string& name) {
    return r.config.contains(name) ? r.config.at(name) : json::object();
}

/// Relative paths resolve against DTDSIM_DATA_ROOT when set, else against
/// the directory holding the config file.
fs::path resolve(const Run& r, const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* root = std::getenv("DTDSIM_DATA_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / path;
    return r.config_dir / path;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void write_run_record(const Run& r) {
    json resolved = r.resolved;
    resolved["seed"] = r.seed;
    write_json(r.out / "resolved_config.json", resolved);
    write_json(r.out / "run_info.json", {{"command", r.command}, {"version", dtdsim::version()}, {"seed", r.seed}});
}

physio::StaticParams load_params(Run& r) {
    if (!r.config.contains("params")) {
        r.resolved["params"] = physio::default_params_path();
        return physio::load_default_params();
    }
    const physio::StaticParams base = physio::load_default_params();
    const fs::path p = resolve(r, r.config.at("params").get<std::string>());
    r.resolved["params"] = p.string();
    return physio::StaticParams::load(p.string(), &base);
}

/// Grid bounds covering every CGM reading, aligned to 5-minute boundaries.
std::pair<std::int64_t, std::int64_t> grid_bounds(const data::RawEventLog& log) {
    if (log.cgm.empty()) throw DataError("event log has no CGM readings");
    const std::int64_t step = data::kStepSeconds;
    auto floor_step = [step](std::int64_t t) { return (t >= 0 ? t / step : (t - step + 1) / step) * step; };
    const std::int64_t start = floor_step(log.cgm.front().time);
    const std::int64_t end = floor_step(log.cgm.back().time) + step;
    return {start, end};
}

data::GriddedSeries load_series(Run& r) {
    const json d = section(r, "data");
    for (const auto& [k, v] : d.items()) {
        if (k != "gridded_csv" && k != "events_dir" && k != "max_gap_minutes" && k != "split") {
            throw ConfigError("unknown key data." + k);
        }
    }
    const double max_gap = d.value("max_gap_minutes", 60.0);
    data::GriddedSeries series;
    if (d.contains("gridded_csv")) {
        const fs::path p = resolve(r, d.at("gridded_csv").get<std::string>());
        series = data::read_gridded_csv(p.string());
    } else if (d.contains("events_dir")) {
        const fs::path p = resolve(r, d.at("events_dir").get<std::string>());
        const auto log = data::read_event_log(p.string());
        const auto [start, end] = grid_bounds(log);
        data::ResampleOptions ro;
        ro.max_gap_minutes = max_gap;
        series = data::resample_to_grid(log, start, end, ro);
    } else {
        throw ConfigError("data needs gridded_csv or events_dir");
    }
    auto filled = data::interpolate_gaps(series, max_gap);
    fmt::print(stderr, "series: {} steps, {} gap steps filled, {} still missing\n", filled.series.size(),
               filled.report.filled, filled.report.still_missing);
    r.resolved["data"] = d;
    r.resolved["data"]["max_gap_minutes"] = max_gap;
    return std::move(filled.series);
}

struct SplitView {
    data::Split parts;
    std::size_t valid_begin = 0, test_begin = 0, test_end = 0;
};

SplitView split_series(Run& r, const data::GriddedSeries& series) {
    const json s = section(r, "data").value("split", json::object());
    const int train = s.value("train_days", 90), valid = s.value("valid_days", 30), test = s.value("test_days", 31);
    r.resolved["data"]["split"] = {{"train_days", train}, {"valid_days", valid}, {"test_days", test}};
    SplitView v;
    v.parts = data::split(series, train, valid, test);
    auto offset = [&](const data::GriddedSeries& part) {
        return static_cast<std::size_t>((part.start - series.start) / data::kStepSeconds);
    };
    v.valid_begin = offset(v.parts.valid);
    v.test_begin = offset(v.parts.test);
    v.test_end = v.test_begin + v.parts.test.size();
    return v;
}

infer::Fitted load_fitted(Run& r, const data::GriddedSeries& train) {
    if (!r.checkpoint) throw ConfigError("--checkpoint is required for " + r.command);
    r.resolved["checkpoint"] = r.checkpoint->string();
    return infer::load_checkpoint(r.checkpoint->string(), &train);
}

/// Anchors from a list of indices or timestamps, else a seeded sample of
/// the test range.
std::vector<std::size_t> pick_anchors(Run& r, const json& cfg, const data::GriddedSeries& series, const SplitView& sv,
                                      int horizon, const std::string& key) {
    std::vector<std::size_t> anchors;
    if (cfg.contains("anchors")) {
        for (const auto& a : cfg.at("anchors")) {
            std::int64_t idx = 0;
            if (a.is_string()) {
                idx = (data::parse_iso8601(a.get<std::string>()).epoch - series.start) / data::kStepSeconds;
            } else {
                idx = a.get<std::int64_t>();
            }
            if (idx < 0 || idx >= static_cast<std::int64_t>(series.size())) throw ConfigError("anchor outside the series");
            anchors.push_back(static_cast<std::size_t>(idx));
        }
        r.resolved[key]["anchors"] = cfg.at("anchors");
        return anchors;
    }
    eval::EvalOptions eo;
    eo.n_anchors = cfg.value("n_anchors", 5);
    eo.seed = r.seed;
    eo.horizons = {horizon};
    r.resolved[key]["n_anchors"] = eo.n_anchors;
    return eval::sample_anchors(sv.test_begin, sv.test_end, eo);
}

void reject_unknown(const json& j, const std::vector<std::string>& keys, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown key " + where + "." + k);
    }
}

// ---- commands ------------------------------------------------------------------

void cmd_synth(Run& r) {
    const auto s = load_params(r);
    json sj = section(r, "synth");
    sj["seed"] = r.seed;
    const auto spec = data::SynthSpec::from_json(sj);
    r.resolved["synth"] = spec.to_json();
    const auto res = data::synthesize(s, spec);
    data::write_gridded_csv((r.out / "series.csv").string(), res.series);
    fs::create_directories(r.out / "events");
    data::write_event_log((r.out / "events").string(), data::to_event_log(res.series));

    std::ofstream truth(r.out / "truth.csv");
    truth << "timestamp,clean_cgm";
    for (auto p : res.truth.which) truth << ',' << physio::param_name(p);
    truth << '\n';
    for (std::size_t t = 0; t < res.series.size(); ++t) {
        truth << data::format_iso8601(res.series.timestamp(t), res.series.tz_offset_minutes) << ','
              << fmt::format("{}", res.truth.clean_cgm[t]);
        for (Eigen::Index k = 0; k < res.truth.d.rows(); ++k) truth << ',' << fmt::format("{}", res.truth.d(k, static_cast<Eigen::Index>(t)));
        truth << '\n';
    }
    write_json(r.out / "truth.json", {{"static_params", res.truth.s.to_json()},
                                      {"basal_u_per_min", res.truth.basal_u_per_min},
                                      {"sigma", res.truth.sigma}});
    fmt::print(stderr, "wrote {} steps to {}\n", res.series.size(), (r.out / "series.csv").string());
}

void cmd_fit(Run& r) {
    const auto s = load_params(r);
    const auto series = load_series(r);
    const auto sv = split_series(r, series);
    json fj = section(r, "fit");
    fj["seed"] = r.seed;
    const auto cfg = infer::FitConfig::from_json(fj);
    r.resolved["fit"] = cfg.to_json();
    const auto f = infer::fit(sv.parts.train, cfg, s, [](int it, double loss) {
        if (it % 500 == 0) fmt::print(stderr, "iteration {:6d}  loss {:.3f}\n", it, loss);
    });
    const fs::path ckpt = r.checkpoint.value_or(r.out / "checkpoint.json");
    r.resolved["checkpoint"] = ckpt.string();
    infer::save_checkpoint(ckpt.string(), f);

    std::ofstream trace(r.out / "fit_trace.csv");
    trace << "iteration,loss,best,rho\n";
    for (std::size_t i = 0; i < f.trace.loss.size(); ++i) {
        trace << i << ',' << fmt::format("{:.6f},{:.6f},{:.9f}", f.trace.loss[i], f.trace.best[i],
                                         i < f.trace.rho.size() ? f.trace.rho[i] : 0.0)
              << '\n';
    }
    const auto pm = infer::posterior_mean_path(f, sv.parts.train);
    std::ofstream path(r.out / "posterior_path.csv");
    path << "timestamp,cgm,fitted_cgm";
    for (auto p : f.model.k_set) path << ',' << physio::param_name(p);
    path << '\n';
    const auto& tr = sv.parts.train;
    for (std::size_t t = 0; t < tr.size(); ++t) {
        path << data::format_iso8601(tr.timestamp(t), tr.tz_offset_minutes) << ','
             << (tr.missing(t) ? std::string() : fmt::format("{}", tr.cgm[t])) << ','
             << fmt::format("{:.6f}", pm.cgm(static_cast<Eigen::Index>(t)));
        for (Eigen::Index k = 0; k < pm.d.rows(); ++k) path << ',' << fmt::format("{:.8g}", pm.d(k, static_cast<Eigen::Index>(t)));
        path << '\n';
    }
    fmt::print(stderr, "fit stopped after {} iterations ({}); sigma {:.3f}\n", f.trace.iterations, f.trace.stop_reason,
               f.model.sigma);
}

void cmd_forecast(Run& r) {
    const auto series = load_series(r);
    const auto sv = split_series(r, series);
    const auto f = load_fitted(r, sv.parts.train);
    const json fc = section(r, "forecast");
    reject_unknown(fc, {"anchors", "n_anchors", "horizon", "samples", "observation_noise"}, "forecast");
    json cj = section(r, "conditioning");
    cj["seed"] = r.seed;
    const auto cond = forecast::ConditioningOptions::from_json(cj);
    r.resolved["conditioning"] = cond.to_json();
    forecast::ForecastRequest base;
    base.horizon = fc.value("horizon", base.horizon);
    base.samples = fc.value("samples", base.samples);
    base.observation_noise = fc.value("observation_noise", false);
    base.seed = r.seed;
    r.resolved["forecast"] = {{"horizon", base.horizon}, {"samples", base.samples}, {"observation_noise", base.observation_noise}};
    for (std::size_t a : pick_anchors(r, fc, series, sv, base.horizon, "forecast")) {
        const auto ap = forecast::condition(f, series, a, cond);
        const auto req = forecast::complete_request(f, series, a, base);
        const auto res = forecast::point_forecast(ap, req);
        forecast::write_forecast_csv((r.out / fmt::format("forecast_{}.csv", a)).string(), series, a, res);
        fmt::print(stderr, "anchor {}: {} rejected draws\n", a, res.rejected);
    }
}

void cmd_evaluate(Run& r) {
    const auto s = load_params(r);
    const auto series = load_series(r);
    const auto sv = split_series(r, series);
    const json ej = section(r, "evaluate");
    reject_unknown(ej,
                   {"horizons", "n_anchors", "contexts", "path_scoring", "models", "samples", "arma", "static_window"},
                   "evaluate");
    json oj = ej;
    for (const char* k : {"models", "samples", "arma", "static_window"}) oj.erase(k);
    oj["seed"] = r.seed;
    const auto opts = eval::EvalOptions::from_json(oj);
    r.resolved["evaluate"] = opts.to_json();

    const json models = ej.value("models", json::array({"dtd_sim", "naive", "static_window", "arma"}));
    r.resolved["evaluate"]["models"] = models;
    const auto anchors = eval::sample_anchors(sv.test_begin, sv.test_end, opts);
    const int H = opts.max_horizon();

    std::vector<eval::MetricRow> rows;
    auto run_model = [&](baselines::Forecaster& model) {
        fmt::print(stderr, "evaluating {} on {} anchors\n", model.name(), anchors.size());
        const auto fc = eval::collect_forecasts(model, series, anchors, H);
        if (fc.failed > 0) fmt::print(stderr, "  {} anchors failed\n", fc.failed);
        baselines::write_external_csv((r.out / fmt::format("forecasts_{}.csv", fc.model)).string(), series, fc.anchors,
                                      fc.paths);
        const auto part = eval::score(fc, series, sv.test_begin, sv.test_end, opts);
        rows.insert(rows.end(), part.begin(), part.end());
    };

    std::optional<infer::Fitted> fitted;
    for (const auto& m : models) {
        if (m.is_object()) {
            const auto name = m.at("name").get<std::string>();
            baselines::ExternalForecaster ext(name, resolve(r, m.at("external").get<std::string>()).string());
            run_model(ext);
            continue;
        }
        const auto name = m.get<std::string>();
        if (name == "naive") {
            baselines::NaiveForecaster naive;
            run_model(naive);
        } else if (name == "dtd_sim") {
            if (!fitted) fitted = load_fitted(r, sv.parts.train);
            json cj = section(r, "conditioning");
            cj["seed"] = r.seed;
            const auto cond = forecast::ConditioningOptions::from_json(cj);
            r.resolved["conditioning"] = cond.to_json();
            const int samples = ej.value("samples", 200);
            r.resolved["evaluate"]["samples"] = samples;
            baselines::DtdForecaster dtd(*fitted, cond, samples, r.seed);
            run_model(dtd);
        } else if (name == "static_window") {
            const auto so = baselines::StaticWindowOptions::from_json(ej.value("static_window", json::object()));
            r.resolved["evaluate"]["static_window"] = so.to_json();
            baselines::StaticWindowForecaster sw(s, data::estimate_basal_rate(sv.parts.train), so);
            run_model(sw);
        } else if (name == "arma") {
            const json aj = ej.value("arma", json::object());
            reject_unknown(aj, {"max_p", "max_q", "iterations", "learning_rate"}, "evaluate.arma");
            baselines::ArmaFitOptions ao;
            ao.iterations = aj.value("iterations", ao.iterations);
            ao.learning_rate = aj.value("learning_rate", ao.learning_rate);
            const int max_p = aj.value("max_p", 3), max_q = aj.value("max_q", 3);
            r.resolved["evaluate"]["arma"] = {
                {"max_p", max_p}, {"max_q", max_q}, {"iterations", ao.iterations}, {"learning_rate", ao.learning_rate}};
            const auto sel = baselines::arma_grid(sv.parts.train.cgm, sv.parts.valid.cgm, max_p, max_q, ao);
            write_json(r.out / "arma_selection.json", {{"model", sel.model.to_json()}, {"validation_mae", sel.validation_mae}});
            baselines::ArmaForecaster arma(sel.model);
            run_model(arma);
        } else {
            throw ConfigError("unknown model '" + name + "'");
        }
    }
    eval::write_metric_csv((r.out / "metrics.csv").string(), rows);
    fmt::print(stderr, "wrote {} metric rows\n", rows.size());
}

void cmd_counterfactual(Run& r) {
    const auto s = load_params(r);
    const auto series = load_series(r);
    const auto sv = split_series(r, series);
    const auto f = load_fitted(r, sv.parts.train);
    const json cf = section(r, "counterfactual");
    reject_unknown(cf, {"anchors", "n_anchors", "horizon", "samples", "scenario_file", "grid"}, "counterfactual");
    json cj = section(r, "conditioning");
    cj["seed"] = r.seed;
    const auto cond = forecast::ConditioningOptions::from_json(cj);
    r.resolved["conditioning"] = cond.to_json();

    std::vector<forecast::Scenario> scenarios;
    if (cf.contains("scenario_file")) {
        const fs::path p = resolve(r, cf.at("scenario_file").get<std::string>());
        std::ifstream in(p);
        if (!in) throw DataError("cannot open " + p.string());
        scenarios = forecast::scenarios_from_json(json::parse(in));
        r.resolved["counterfactual"]["scenario_file"] = p.string();
    } else {
        const json g = cf.value("grid", json::object());
        const double off = g.value("offset_minutes", 30.0), carbs = g.value("carbs_g", 50.0), bolus = g.value("bolus_u", 8.0);
        scenarios = forecast::meal_bolus_grid(off, carbs, bolus);
        r.resolved["counterfactual"]["grid"] = {{"offset_minutes", off}, {"carbs_g", carbs}, {"bolus_u", bolus}};
    }
    forecast::ForecastRequest base;
    base.horizon = cf.value("horizon", base.horizon);
    base.samples = cf.value("samples", base.samples);
    base.seed = r.seed;
    r.resolved["counterfactual"]["horizon"] = base.horizon;
    r.resolved["counterfactual"]["samples"] = base.samples;
    const double basal_static = data::estimate_basal_rate(sv.parts.train);

    std::ofstream out(r.out / "counterfactual.csv");
    out << "anchor_timestamp,model,scenario,step,minutes,mean,lo95,hi95\n";
    for (std::size_t a : pick_anchors(r, cf, series, sv, base.horizon, "counterfactual")) {
        const std::string ts = data::format_iso8601(series.timestamp(a), series.tz_offset_minutes);
        const auto ap = forecast::condition(f, series, a, cond);
        const auto req = forecast::complete_request(f, series, a, base);
        const auto res = forecast::counterfactual_forecast(ap, f.basal_u_per_min, req, scenarios);
        for (const auto& sc : scenarios) {
            const auto& fr = res.at(sc.name);
            for (Eigen::Index k = 0; k < fr.mean.size(); ++k) {
                out << ts << ",dtd_sim," << sc.name << ',' << k + 1 << ',' << (k + 1) * data::kStepMinutes << ','
                    << fmt::format("{:.6f},{:.6f},{:.6f}", fr.mean(k), fr.lo95(k), fr.hi95(k)) << '\n';
            }
        }
        // Static simulator from the replayed state at the anchor, for contrast.
        const auto ws = infer::replay_to(s, basal_static, series, a + 1, cond.window + cond.burn_in);
        for (const auto& sc : scenarios) {
            physio::Simulator sim(ws.x);
            sim.set_meal_mass_mg(ws.meal_mass_mg);
            const auto u = forecast::scenario_inputs(sc, basal_static, base.horizon);
            for (int k = 0; k < base.horizon; ++k) {
                const double g = physio::cgm_observe(sim.step(s.values, u[static_cast<std::size_t>(k)]), s);
                out << ts << ",static," << sc.name << ',' << k + 1 << ',' << (k + 1) * data::kStepMinutes << ','
                    << fmt::format("{:.6f},,", g) << '\n';
            }
        }
        fmt::print(stderr, "anchor {} done\n", a);
    }
}

void cmd_simulate(Run& r) {
    json sj = section(r, "simulate");
    reject_unknown(sj, {"duration_minutes", "initial_glucose", "basal_u_per_min", "events", "schedule_csv"}, "simulate");
    const auto s = load_params(r);
    const int duration = sj.value("duration_minutes", 1440);
    const double g0 = sj.value("initial_glucose", 120.0);
    const double basal = sj.contains("basal_u_per_min") ? sj.at("basal_u_per_min").get<double>()
                                                        : physio::basal_for_glucose(s, g0);
    forecast::Scenario sc{"schedule", {}};
    for (const auto& e : sj.value("events", json::array())) {
        sc.events.push_back({e.at("offset_minutes").get<double>(), e.value("carbs_g", 0.0), e.value("bolus_u", 0.0)});
    }
    if (sj.contains("schedule_csv")) {
        const fs::path p = resolve(r, sj.at("schedule_csv").get<std::string>());
        std::ifstream in(p);
        if (!in) throw DataError("cannot open " + p.string());
        std::string line;
        std::getline(in, line);
        if (line.rfind("offset_minutes,carbs_g,bolus_u", 0) != 0) {
            throw DataError(p.string() + ": expected header offset_minutes,carbs_g,bolus_u");
        }
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            double off = 0, c = 0, b = 0;
            if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &off, &c, &b) != 3) throw DataError(p.string() + ": malformed row");
            sc.events.push_back({off, c, b});
        }
    }
    if (duration < data::kStepMinutes) throw ConfigError("simulate.duration_minutes must cover one step");
    const int steps = duration / data::kStepMinutes;
    r.resolved["simulate"] = sj;
    r.resolved["simulate"]["duration_minutes"] = duration;
    r.resolved["simulate"]["initial_glucose"] = g0;
    r.resolved["simulate"]["basal_u_per_min"] = basal;

    const auto u = forecast::scenario_inputs(sc, basal, steps);
    physio::Simulator sim(physio::quasi_steady_state(s, basal, g0));
    std::ofstream out(r.out / "simulation.csv");
    out << "minute,insulin_u,carbs_g";
    for (std::size_t c = 0; c < physio::kStateDim; ++c) out << ',' << physio::comp_name(static_cast<physio::Comp>(c));
    out << ",cgm\n";
    for (int k = 0; k < steps; ++k) {
        const auto& x = sim.step(s.values, u[static_cast<std::size_t>(k)]);
        out << (k + 1) * data::kStepMinutes << ',' << fmt::format("{},{}", u[static_cast<std::size_t>(k)].insulin_units,
                                                                  u[static_cast<std::size_t>(k)].carb_grams);
        for (double v : x) out << ',' << fmt::format("{:.9g}", v);
        out << ',' << fmt::format("{:.6f}", physio::cgm_observe(x, s)) << '\n';
    }
}

int fail(const Run& r, const std::string& kind, const std::string& message, int code) {
    const json rec{{"error", kind}, {"message", message}, {"command", r.command}};
    fmt::print(stderr, "{}\n", rec.dump());
    std::error_code ec;
    fs::create_directories(r.out, ec);
    if (!ec) std::ofstream(r.out / "error.json") << rec.dump(2) << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hybrid glucose digital twin: synthesis, fitting, forecasting and evaluation"};
    app.set_version_flag("--version", std::string(dtdsim::version()));
    app.require_subcommand(1);

    Run run;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
    std::string out = "out";

    const std::vector<std::pair<std::string, std::string>> commands{
        {"synth", "generate a synthetic dataset with known ground truth"},
        {"fit", "fit the hybrid model to the training split"},
        {"forecast", "posterior-predictive forecasts at chosen anchors"},
        {"evaluate", "score the model and baselines on the test split"},
        {"counterfactual", "forecasts under alternative meal/bolus scenarios"},
        {"simulate", "run the static simulator on an input schedule"}};
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "run configuration (JSON)");
        sub->add_option("--seed", seed, "random seed, overrides the config");
        sub->add_option("--out", out, "output directory")->capture_default_str();
        sub->add_option("--checkpoint", checkpoint, "checkpoint path");
    }
    CLI11_PARSE(app, argc, argv);
    run.command = app.get_subcommands().front()->get_name();
    run.out = out;

    try {
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("cannot open config " + config_path);
            try {
                run.config = json::parse(in);
            } catch (const json::parse_error& e) {
                throw ConfigError(std::string("config is not valid JSON: ") + e.what());
            }
            if (!run.config.is_object()) throw ConfigError("config must be a JSON object");
            reject_unknown(run.config, kSections, "config");
            run.config_dir = fs::path(config_path).parent_path();
            if (run.config_dir.empty()) run.config_dir = ".";
        }
        run.seed = seed.value_or(run.config.value("seed", std::uint64_t{0}));
        if (!checkpoint.empty()) run.checkpoint = checkpoint;
        fs::create_directories(run.out);

        if (run.command == "synth") cmd_synth(run);
        else if (run.command == "fit") cmd_fit(run);
        else if (run.command == "forecast") cmd_forecast(run);
        else if (run.command == "evaluate") cmd_evaluate(run);
        else if (run.command == "counterfactual") cmd_counterfactual(run);
        else if (run.command == "simulate") cmd_simulate(run);
        write_run_record(run);
    } catch (const dtdsim::Error& e) {
        return fail(run, e.kind(), e.what(), 1);
    } catch (const json::exception& e) {
        return fail(run, "config", e.what(), 1);
    } catch (const std::exception& e) {
        return fail(run, "internal", e.what(), 3);
    }
    return 0;
}
