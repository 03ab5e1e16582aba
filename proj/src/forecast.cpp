#include "dtdsim/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "dtdsim/errors.hpp"
#include "dtdsim/json_keys.hpp"
#include "dtdsim/rng.hpp"

namespace dtdsim::forecast {

using infer::Index;
using physio::Comp;
using physio::Param;

namespace {

double minute_of_day_at(const data::GriddedSeries& s, std::int64_t index) {
    const std::int64_t local = s.start + index * data::kStepSeconds + s.tz_offset_minutes * 60;
    const std::int64_t day = local >= 0 ? local / data::kDaySeconds : (local - data::kDaySeconds + 1) / data::kDaySeconds;
    return static_cast<double>(local - day * data::kDaySeconds) / 60.0;
}

/// Covariates for series steps [first, first + n); indices outside the
/// series get exact clock features and the mean energy.
MatrixXd covariates_range(const data::GriddedSeries& s, std::int64_t first, std::int64_t n,
                          const latent::CovariateScaling& sc) {
    std::vector<double> mod(static_cast<std::size_t>(n)), energy(static_cast<std::size_t>(n));
    for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t idx = first + k;
        mod[static_cast<std::size_t>(k)] = minute_of_day_at(s, idx);
        const bool inside = idx >= 0 && idx < static_cast<std::int64_t>(s.size());
        energy[static_cast<std::size_t>(k)] = inside ? s.energy[static_cast<std::size_t>(idx)] : sc.energy_mean;
    }
    return latent::build_covariates(mod, energy, sc);
}

}  // namespace

nlohmann::json ConditioningOptions::to_json() const {
    return {{"window", window},         {"burn_in", burn_in},           {"prior_steps", prior_steps},
            {"iterations", iterations}, {"learning_rate", learning_rate}, {"seed", seed}};
}

ConditioningOptions ConditioningOptions::from_json(const nlohmann::json& j) {
    require_known_keys(j, {"window", "burn_in", "prior_steps", "iterations", "learning_rate", "seed"}, "conditioning");
    ConditioningOptions o;
    o.window = j.value("window", o.window);
    o.burn_in = j.value("burn_in", o.burn_in);
    o.prior_steps = j.value("prior_steps", o.prior_steps);
    o.iterations = j.value("iterations", o.iterations);
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.seed = j.value("seed", o.seed);
    if (o.window < 1 || o.burn_in < 0 || o.prior_steps < 0 || o.iterations < 0 || !(o.learning_rate > 0.0)) {
        throw ConfigError("invalid conditioning options");
    }
    return o;
}

AnchorPosterior condition(const infer::Fitted& f, const data::GriddedSeries& series, std::size_t anchor,
                          const ConditioningOptions& opts) {
    series.check();
    if (anchor >= series.size()) throw ForecastError("anchor lies outside the series");
    AnchorPosterior ap;
    ap.anchor = anchor;
    const auto W = std::min<std::size_t>(static_cast<std::size_t>(opts.window), anchor + 1);
    ap.window_start = anchor + 1 - W;
    const infer::WindowStart ws = infer::replay_to(f.model.s, f.basal_u_per_min, series, ap.window_start, opts.burn_in);
    ap.x_start = ws.x;
    ap.meal_mass_start = ws.meal_mass_mg;

    // Latent prior at the window start from the mean/covariance recursions.
    ap.model = f.model;
    latent::DynamicsParams& dyn = ap.model.dyn;
    const auto n_prior = static_cast<std::int64_t>(opts.prior_steps);
    const MatrixXd a_prior =
        covariates_range(series, static_cast<std::int64_t>(ap.window_start) - n_prior, n_prior, f.scaling);
    const MatrixXd Q = dyn.Q_sqrt * dyn.Q_sqrt.transpose();
    VectorXd m = dyn.mu0;
    MatrixXd P = dyn.Sigma0_sqrt * dyn.Sigma0_sqrt.transpose();
    for (std::int64_t k = 0; k < n_prior; ++k) {
        m = dyn.A * m + dyn.B * a_prior.col(k);
        P = dyn.A * P * dyn.A.transpose() + Q;
    }
    P = 0.5 * (P + P.transpose());
    P.diagonal().array() += 1e-12;
    dyn.mu0 = m;
    dyn.Sigma0_sqrt = Eigen::LLT<MatrixXd>(P).matrixL();

    const data::GriddedSeries win = series.slice(ap.window_start, anchor + 1);
    infer::SeriesContext ctx;
    ctx.y = Eigen::Map<const VectorXd>(win.cgm.data(), static_cast<Index>(W));
    ctx.covariates = covariates_range(series, static_cast<std::int64_t>(ap.window_start), static_cast<std::int64_t>(W),
                                      f.scaling);
    ctx.inputs = win.inputs();
    ctx.x0 = ap.x_start;
    ctx.initial_meal_mass_mg = ap.meal_mass_start;
    ap.covariates = ctx.covariates;
    ap.inputs = ctx.inputs;

    infer::FitConfig cfg = f.config;
    cfg.frozen = {"A", "B", "Q_sqrt", "mu0", "Sigma0_sqrt", "emission", "log_sigma"};
    cfg.learning_rate = opts.learning_rate;
    cfg.max_iterations = opts.iterations;
    cfg.patience = std::max(1, opts.iterations);
    cfg.seed = splitmix64(opts.seed ^ splitmix64(anchor));
    ap.q = infer::VariationalPosterior::standard(dyn.dim(), static_cast<Index>(W), cfg.init_posterior_sd);
    infer::ElboObjective obj = infer::make_objective(ap.model, ctx, cfg);
    auto res = infer::optimize(obj, obj.pack(dyn, ap.model.sigma, ap.q), cfg);
    infer::ModelParams unpacked = ap.model;
    infer::unpack_model(obj, res.best, unpacked, ap.q);
    ap.final_loss = res.trace.best.empty() ? 0.0 : res.trace.best.back();
    return ap;
}

ForecastRequest complete_request(const infer::Fitted& f, const data::GriddedSeries& series, std::size_t anchor,
                                 ForecastRequest req) {
    if (req.horizon < 1) throw ConfigError("forecast horizon must be at least 1");
    if (req.samples < 1) throw ConfigError("forecast needs at least one sample");
    const auto h = static_cast<std::size_t>(req.horizon);
    if (req.future_inputs.empty()) {
        req.future_inputs.resize(h);
        for (std::size_t k = 0; k < h; ++k) {
            const std::size_t idx = anchor + 1 + k;
            req.future_inputs[k] = idx < series.size() ? series.input(idx)
                                                       : physio::ExogenousInput{f.basal_u_per_min * data::kStepMinutes, 0.0};
        }
    }
    if (req.future_inputs.size() != h) throw DimensionError("future inputs must cover the horizon");
    if (req.future_covariates.size() == 0) {
        std::vector<double> mod(h), energy(h);
        for (std::size_t k = 0; k < h; ++k) {
            const auto idx = static_cast<std::int64_t>(anchor + 1 + k);
            mod[k] = minute_of_day_at(series, idx);
            std::int64_t past = idx - data::kStepsPerDay;
            while (past > static_cast<std::int64_t>(anchor)) past -= data::kStepsPerDay;
            energy[k] = past >= 0 ? series.energy[static_cast<std::size_t>(past)] : f.scaling.energy_mean;
        }
        req.future_covariates = latent::build_covariates(mod, energy, f.scaling);
    }
    if (req.future_covariates.cols() != req.horizon) throw DimensionError("future covariates must cover the horizon");
    return req;
}

VectorXd posterior_predictive_sample(const AnchorPosterior& ap, const ForecastRequest& req, std::uint64_t sample_index,
                                     int* rejected) {
    const auto& dyn = ap.model.dyn;
    const Index D = dyn.dim();
    const Index W = ap.q.length();
    const Index H = req.horizon;
    if (static_cast<Index>(req.future_inputs.size()) != H || req.future_covariates.cols() != H) {
        throw DimensionError("forecast request is incomplete; call complete_request first");
    }
    MatrixXd cov(ap.covariates.rows(), W + H);
    cov << ap.covariates, req.future_covariates;
    const MatrixXd s = ap.q.s();
    const VectorXd s0 = ap.q.s0();

    Rng rng(req.seed, sample_index);
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
        const VectorXd eta0 = rng.normal_vector(D);
        const MatrixXd eta = rng.normal_matrix(D, W);
        const MatrixXd eta_f = rng.normal_matrix(D, H);
        VectorXd eps0 = ap.q.m0;
        MatrixXd eps(D, W + H);
        eps.leftCols(W) = ap.q.m;
        if (!req.reuse_means) {
            eps0 += s0.cwiseProduct(eta0);
            eps.leftCols(W) += s.cwiseProduct(eta);
        }
        eps.rightCols(H) = eta_f;
        const VectorXd z0 = dyn.mu0 + dyn.Sigma0_sqrt.triangularView<Eigen::Lower>() * eps0;
        const MatrixXd Z = latent::unroll(z0, cov, eps, dyn);
        const MatrixXd d = link::link_batch(Z, ap.model.net);

        physio::Simulator sim(ap.x_start);
        sim.set_meal_mass_mg(ap.meal_mass_start);
        physio::ParamVec<double> p = ap.model.s.values;
        VectorXd path(H);
        bool ok = true;
        try {
            for (Index t = 0; t < W + H; ++t) {
                for (std::size_t k = 0; k < ap.model.k_set.size(); ++k) at(p, ap.model.k_set[k]) = d(static_cast<Index>(k), t);
                const auto& u = t < W ? ap.inputs[static_cast<std::size_t>(t)] : req.future_inputs[static_cast<std::size_t>(t - W)];
                const auto& x = sim.step(p, u);
                if (t >= W) path(t - W) = at(x, Comp::Gs) / at(p, Param::V_G);
            }
        } catch (const DivergenceError&) {
            ok = false;
        } catch (const StateValidityError&) {
            ok = false;
        }
        if (ok && path.allFinite()) {
            if (req.observation_noise)
                for (Index k = 0; k < H; ++k) path(k) += ap.model.sigma * rng.normal();
            return path;
        }
        if (rejected != nullptr) ++*rejected;
    }
    throw ForecastError(fmt::format("sample {} diverged on {} consecutive draws", sample_index, kMaxRetries + 1));
}

double quantile(std::vector<double> v, double p) {
    if (v.empty()) throw UndefinedMetricError("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return v[lo] + w * (v[hi] - v[lo]);
}

ForecastResult point_forecast(const AnchorPosterior& ap, const ForecastRequest& req) {
    const Index H = req.horizon;
    const int M = req.samples;
    MatrixXd paths(M, H);
    ForecastResult r;
    for (int i = 0; i < M; ++i) {
        try {
            paths.row(i) = posterior_predictive_sample(ap, req, static_cast<std::uint64_t>(i), &r.rejected).transpose();
        } catch (const ForecastError&) {
            r.rejected += kMaxRetries + 1;
            throw ForecastError(fmt::format("forecast at anchor {} failed: {} rejected draws", ap.anchor, r.rejected));
        }
        if (r.rejected > M / 2) {
            throw ForecastError(fmt::format("forecast at anchor {}: more than half of {} samples rejected", ap.anchor, M));
        }
    }
    r.mean = paths.colwise().mean().transpose();
    r.lo95.resize(H);
    r.hi95.resize(H);
    std::vector<double> col(static_cast<std::size_t>(M));
    for (Index k = 0; k < H; ++k) {
        for (int i = 0; i < M; ++i) col[static_cast<std::size_t>(i)] = paths(i, k);
        r.lo95(k) = std::min(quantile(col, 0.025), r.mean(k));
        r.hi95(k) = std::max(quantile(col, 0.975), r.mean(k));
    }
    if (req.keep_paths) r.paths = std::move(paths);
    return r;
}

std::vector<physio::ExogenousInput> scenario_inputs(const Scenario& sc, double basal_u_per_min, int horizon) {
    std::vector<physio::ExogenousInput> u(static_cast<std::size_t>(horizon),
                                          physio::ExogenousInput{basal_u_per_min * data::kStepMinutes, 0.0});
    for (const auto& e : sc.events) {
        if (e.offset_minutes < 0.0 || e.carbs_g < 0.0 || e.bolus_u < 0.0) {
            throw ConfigError("scenario '" + sc.name + "' has a negative offset or amount");
        }
        const auto k = static_cast<std::size_t>(std::floor(e.offset_minutes / data::kStepMinutes));
        if (k >= u.size()) continue;
        u[k].carb_grams += e.carbs_g;
        u[k].insulin_units += e.bolus_u;
    }
    return u;
}

std::vector<Scenario> meal_bolus_grid(double offset_minutes, double carbs_g, double bolus_u) {
    return {{"no_meal_no_bolus", {}},
            {"meal_no_bolus", {{offset_minutes, carbs_g, 0.0}}},
            {"no_meal_bolus", {{offset_minutes, 0.0, bolus_u}}},
            {"meal_bolus", {{offset_minutes, carbs_g, bolus_u}}}};
}

std::vector<Scenario> scenarios_from_json(const nlohmann::json& j) {
    std::vector<Scenario> out;
    for (const auto& sj : j.at("scenarios")) {
        Scenario sc;
        sc.name = sj.at("name").get<std::string>();
        for (const auto& ej : sj.value("events", nlohmann::json::array())) {
            sc.events.push_back({ej.at("offset_minutes").get<double>(), ej.value("carbs_g", 0.0), ej.value("bolus_u", 0.0)});
        }
        out.push_back(std::move(sc));
    }
    if (out.empty()) throw ConfigError("scenario file lists no scenarios");
    return out;
}

std::map<std::string, ForecastResult> counterfactual_forecast(const AnchorPosterior& ap, double basal_u_per_min,
                                                              const ForecastRequest& base,
                                                              const std::vector<Scenario>& scenarios) {
    std::map<std::string, ForecastResult> out;
    for (const auto& sc : scenarios) {
        ForecastRequest req = base;
        req.future_inputs = scenario_inputs(sc, basal_u_per_min, base.horizon);
        if (!out.emplace(sc.name, point_forecast(ap, req)).second) {
            throw ConfigError("duplicate scenario name '" + sc.name + "'");
        }
    }
    return out;
}

void write_forecast_csv(const std::string& path, const data::GriddedSeries& series, std::size_t anchor,
                        const ForecastResult& r) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "timestamp,mean,lo95,hi95\n";
    for (Index k = 0; k < r.mean.size(); ++k) {
        const std::int64_t ts = series.start + static_cast<std::int64_t>(anchor + 1 + static_cast<std::size_t>(k)) * data::kStepSeconds;
        out << data::format_iso8601(ts, series.tz_offset_minutes) << ',' << fmt::format("{:.6f},{:.6f},{:.6f}", r.mean(k), r.lo95(k), r.hi95(k))
            << '\n';
    }
}

}  // namespace dtdsim::forecast
