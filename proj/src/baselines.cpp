#include "dtdsim/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "dtdsim/autodiff.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/json_keys.hpp"

namespace dtdsim::baselines {

using physio::Comp;
using physio::ExogenousInput;
using physio::Param;

namespace {

bool observed(double v) { return std::isfinite(v); }

/// Linear fill of interior gaps; leading gaps take the first observation,
/// trailing gaps the last.
std::vector<double> linear_fill(const std::vector<double>& y) {
    std::vector<double> out = y;
    std::size_t prev = y.size();
    for (std::size_t t = 0; t < y.size(); ++t) {
        if (!observed(y[t])) continue;
        if (prev == y.size()) {
            for (std::size_t k = 0; k < t; ++k) out[k] = y[t];
        } else {
            for (std::size_t k = prev + 1; k < t; ++k) {
                const double w = static_cast<double>(k - prev) / static_cast<double>(t - prev);
                out[k] = y[prev] + w * (y[t] - y[prev]);
            }
        }
        prev = t;
    }
    if (prev == y.size()) throw DataError("series has no observed values");
    for (std::size_t k = prev + 1; k < y.size(); ++k) out[k] = y[prev];
    return out;
}

/// Centred recursion shared by residuals, one-step predictions and the fit.
template <class T>
void arma_recursion(const std::vector<T>& phi, const std::vector<T>& theta, const std::vector<double>& x,
                    std::vector<T>& e, std::vector<T>& pred, const T& zero) {
    const std::size_t n = x.size();
    e.assign(n, zero);
    pred.assign(n, zero);
    std::vector<T> xs(n, zero);
    for (std::size_t t = 0; t < n; ++t) {
        T acc = zero;
        for (std::size_t i = 1; i <= phi.size() && i <= t; ++i) acc = acc + phi[i - 1] * xs[t - i];
        for (std::size_t j = 1; j <= theta.size() && j <= t; ++j) acc = acc + theta[j - 1] * e[t - j];
        pred[t] = acc;
        if (observed(x[t])) {
            xs[t] = zero + x[t];
            e[t] = xs[t] - acc;
        } else {
            xs[t] = acc;
        }
    }
}

std::vector<double> centred(const ArmaModel& m, const std::vector<double>& y) {
    std::vector<double> x(y.size());
    for (std::size_t t = 0; t < y.size(); ++t) x[t] = y[t] - m.intercept;
    return x;
}

/// Least squares of x_t on lagged x and lagged proxy residuals.
std::vector<double> lagged_ols(const std::vector<double>& x, const std::vector<double>& r, int p, int q) {
    const int lag = std::max(p, q);
    const auto n = static_cast<Eigen::Index>(x.size()) - lag;
    if (p + q == 0 || n <= p + q) return std::vector<double>(static_cast<std::size_t>(p + q), 0.0);
    Eigen::MatrixXd X(n, p + q);
    Eigen::VectorXd yv(n);
    for (Eigen::Index row = 0; row < n; ++row) {
        const auto t = static_cast<std::size_t>(row + lag);
        yv(row) = x[t];
        for (int i = 0; i < p; ++i) X(row, i) = x[t - static_cast<std::size_t>(i) - 1];
        for (int j = 0; j < q; ++j) X(row, p + j) = r[t - static_cast<std::size_t>(j) - 1];
    }
    const Eigen::VectorXd b = X.colPivHouseholderQr().solve(yv);
    return {b.data(), b.data() + b.size()};
}

std::vector<double> neg(std::vector<double> v) {
    for (double& c : v) c = -c;
    return v;
}

}  // namespace

// ---- ARMA ----------------------------------------------------------------------

nlohmann::json ArmaModel::to_json() const {
    return {{"phi", phi}, {"theta", theta}, {"intercept", intercept}, {"variance", variance}};
}

ArmaModel ArmaModel::from_json(const nlohmann::json& j) {
    ArmaModel m;
    m.phi = j.at("phi").get<std::vector<double>>();
    m.theta = j.at("theta").get<std::vector<double>>();
    m.intercept = j.at("intercept").get<double>();
    m.variance = j.at("variance").get<double>();
    if (m.variance < 0.0) throw ConfigError("ARMA variance must be non-negative");
    return m;
}

std::vector<std::complex<double>> inverse_roots(const std::vector<double>& c) {
    const auto n = static_cast<Eigen::Index>(c.size());
    if (n == 0) return {};
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) C(0, i) = c[static_cast<std::size_t>(i)];
    for (Eigen::Index i = 1; i < n; ++i) C(i, i - 1) = 1.0;
    const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(C, false).eigenvalues();
    return {ev.data(), ev.data() + ev.size()};
}

std::vector<double> reflect_roots(const std::vector<double>& c) {
    constexpr double kMaxModulus = 1.0 - 1e-6;
    auto roots = inverse_roots(c);
    bool changed = false;
    for (auto& r : roots) {
        const double a = std::abs(r);
        if (a < kMaxModulus) continue;
        changed = true;
        r = a > 1.0 ? 1.0 / std::conj(r) : r;
        if (std::abs(r) > kMaxModulus) r *= kMaxModulus / std::abs(r);
    }
    if (!changed) return c;
    // prod (z - r_i) = z^n + a_1 z^{n-1} + ... ; c_i = -a_i.
    std::vector<std::complex<double>> a{1.0};
    for (const auto& r : roots) {
        std::vector<std::complex<double>> next(a.size() + 1, 0.0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            next[i] += a[i];
            next[i + 1] -= r * a[i];
        }
        a = std::move(next);
    }
    std::vector<double> out(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = -a[i + 1].real();
    return out;
}

std::vector<double> arma_residuals(const ArmaModel& m, const std::vector<double>& y) {
    std::vector<double> e, pred;
    arma_recursion(m.phi, m.theta, centred(m, y), e, pred, 0.0);
    return e;
}

std::vector<double> arma_one_step(const ArmaModel& m, const std::vector<double>& y) {
    std::vector<double> e, pred;
    arma_recursion(m.phi, m.theta, centred(m, y), e, pred, 0.0);
    for (double& v : pred) v += m.intercept;
    return pred;
}

double arma_loglik(const ArmaModel& m, const std::vector<double>& y) {
    if (!(m.variance > 0.0)) throw UndefinedMetricError("log-likelihood needs a positive innovation variance");
    const auto e = arma_residuals(m, y);
    double ll = 0.0;
    for (std::size_t t = static_cast<std::size_t>(m.p()); t < y.size(); ++t) {
        if (!observed(y[t])) continue;
        ll -= 0.5 * (std::log(2.0 * std::numbers::pi * m.variance) + e[t] * e[t] / m.variance);
    }
    return ll;
}

ArmaModel arma_fit(const std::vector<double>& y, int p, int q, const ArmaFitOptions& opts) {
    if (p < 0 || q < 0) throw DimensionError("ARMA orders must be non-negative");
    const auto n_obs = static_cast<std::size_t>(std::count_if(y.begin(), y.end(), observed));
    if (n_obs <= static_cast<std::size_t>(10 * (p + q)) || n_obs < 2) {
        throw DimensionError(fmt::format("ARMA({},{}) needs more than {} observations, got {}", p, q, 10 * (p + q), n_obs));
    }
    const std::vector<double> filled = linear_fill(y);
    const std::size_t n = filled.size();
    ArmaModel m;
    double mean = 0.0;
    for (double v : filled) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : filled) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    m.intercept = mean;
    m.phi.assign(static_cast<std::size_t>(p), 0.0);
    m.theta.assign(static_cast<std::size_t>(q), 0.0);
    if (var == 0.0 || p + q == 0) {
        m.variance = var;
        return m;
    }
    const double sd = std::sqrt(var);
    std::vector<double> x(n);
    for (std::size_t t = 0; t < n; ++t) x[t] = (filled[t] - mean) / sd;

    // Hannan-Rissanen start: residuals of a long autoregression stand in for
    // the innovations.
    const int long_order = std::clamp(static_cast<int>(n / 20), p + q, 20);
    const auto ar_long = lagged_ols(x, x, long_order, 0);
    std::vector<double> proxy(n, 0.0);
    for (std::size_t t = static_cast<std::size_t>(long_order); t < n; ++t) {
        double acc = 0.0;
        for (int i = 0; i < long_order; ++i) acc += ar_long[static_cast<std::size_t>(i)] * x[t - static_cast<std::size_t>(i) - 1];
        proxy[t] = x[t] - acc;
    }
    auto start = lagged_ols(x, proxy, p, q);
    std::vector<double> phi0(start.begin(), start.begin() + p), theta0(start.begin() + p, start.end());
    phi0 = reflect_roots(phi0);
    theta0 = neg(reflect_roots(neg(theta0)));
    std::vector<double> w(phi0);
    w.insert(w.end(), theta0.begin(), theta0.end());

    const std::size_t first = static_cast<std::size_t>(p);
    const double inv_count = 1.0 / static_cast<double>(n - first);
    const ad::LossFn css = [&](ad::Tape& tape, std::span<const ad::Var> v) {
        std::vector<ad::Var> ph(v.begin(), v.begin() + p), th(v.begin() + p, v.end());
        std::vector<ad::Var> e, pred;
        const ad::Var zero = tape.constant(0.0);
        arma_recursion(ph, th, x, e, pred, zero);
        ad::Var acc = zero;
        for (std::size_t t = first; t < n; ++t) acc += e[t] * e[t];
        return acc * inv_count;
    };

    infer::AdamState adam;
    std::vector<double> best = w;
    double best_loss = std::numeric_limits<double>::infinity();
    double grad_norm = std::numeric_limits<double>::infinity();
    for (int it = 0; it < opts.iterations; ++it) {
        const auto g = ad::gradient(css, w);
        grad_norm = 0.0;
        for (double gi : g.gradient) grad_norm += gi * gi;
        grad_norm = std::sqrt(grad_norm);
        if (std::isfinite(g.value) && g.value < best_loss) {
            best_loss = g.value;
            best = w;
        }
        if (grad_norm < opts.grad_tol) break;
        const double lr = opts.learning_rate / (1.0 + static_cast<double>(it) / 200.0);
        infer::adam_step(w, g.gradient, adam, lr);
    }
    const auto g_best = ad::gradient(css, best);
    double best_norm = 0.0;
    for (double gi : g_best.gradient) best_norm += gi * gi;
    best_norm = std::sqrt(best_norm);
    if (!std::isfinite(g_best.value) || !(best_norm <= opts.fail_grad_norm)) {
        throw ConvergenceError(fmt::format("ARMA({},{}) fit did not converge: final gradient norm {:.3e}", p, q, best_norm));
    }
    m.phi = reflect_roots({best.begin(), best.begin() + p});
    m.theta = neg(reflect_roots(neg({best.begin() + p, best.end()})));
    const auto e = arma_residuals(m, filled);
    double ss = 0.0;
    for (std::size_t t = first; t < n; ++t) ss += e[t] * e[t];
    m.variance = ss * inv_count;
    return m;
}

std::vector<double> arma_forecast(const ArmaModel& m, const std::vector<double>& history, int horizon) {
    const auto need = static_cast<std::size_t>(std::max(m.p(), m.q()));
    if (history.size() < need || history.empty()) {
        throw DimensionError(fmt::format("ARMA forecast needs at least {} history values", std::max<std::size_t>(need, 1)));
    }
    std::vector<double> e, pred;
    const auto x = centred(m, history);
    arma_recursion(m.phi, m.theta, x, e, pred, 0.0);
    std::vector<double> xs(x);
    for (std::size_t t = 0; t < xs.size(); ++t)
        if (!observed(xs[t])) xs[t] = pred[t];
    const std::size_t n = xs.size();
    std::vector<double> out(static_cast<std::size_t>(std::max(horizon, 0)));
    for (std::size_t k = 0; k < out.size(); ++k) {
        double acc = 0.0;
        for (std::size_t i = 1; i <= m.phi.size(); ++i) {
            const std::size_t back = n + k;
            if (i > back) break;
            acc += m.phi[i - 1] * xs[back - i];
        }
        for (std::size_t j = 1; j <= m.theta.size(); ++j) {
            if (j <= k) continue;  // future innovations have zero mean
            if (n + k < j) break;
            acc += m.theta[j - 1] * e[n + k - j];
        }
        xs.push_back(acc);
        out[k] = acc + m.intercept;
    }
    return out;
}

ArmaSelection arma_grid(const std::vector<double>& train, const std::vector<double>& valid, int max_p, int max_q,
                        const ArmaFitOptions& opts) {
    if (valid.empty()) throw DataError("ARMA order selection needs a validation series");
    std::vector<double> joined(train);
    joined.insert(joined.end(), valid.begin(), valid.end());
    ArmaSelection sel;
    double best = std::numeric_limits<double>::infinity();
    for (int p = 0; p <= max_p; ++p) {
        for (int q = 0; q <= max_q; ++q) {
            ArmaModel m;
            try {
                m = arma_fit(train, p, q, opts);
            } catch (const ConvergenceError&) {
                continue;
            }
            const auto pred = arma_one_step(m, joined);
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t t = train.size(); t < joined.size(); ++t) {
                if (!observed(joined[t])) continue;
                sum += std::abs(pred[t] - joined[t]);
                ++count;
            }
            if (count == 0) throw DataError("validation series has no observed values");
            const double mae = sum / static_cast<double>(count);
            sel.validation_mae[fmt::format("{},{}", p, q)] = mae;
            if (mae < best) {
                best = mae;
                sel.model = m;
            }
        }
    }
    if (sel.validation_mae.empty()) throw ConvergenceError("no ARMA order converged");
    return sel;
}

// ---- naive -------------------------------------------------------------------

std::vector<double> naive_forecast(const std::vector<double>& history, int horizon) {
    for (std::size_t t = history.size(); t-- > 0;) {
        if (observed(history[t])) return std::vector<double>(static_cast<std::size_t>(std::max(horizon, 0)), history[t]);
    }
    throw DataError("naive forecast needs at least one observation");
}

// ---- static simulator on a moving window ------------------------------------------

nlohmann::json StaticWindowOptions::to_json() const {
    return {{"window", window},
            {"burn_in", burn_in},
            {"iterations", iterations},
            {"learning_rate", learning_rate},
            {"subset", physio::param_list_to_json(subset)},
            {"fit_sigma", fit_sigma}};
}

StaticWindowOptions StaticWindowOptions::from_json(const nlohmann::json& j) {
    require_known_keys(j, {"window", "burn_in", "iterations", "learning_rate", "subset", "fit_sigma"},
                       "static_window");
    StaticWindowOptions o;
    o.window = j.value("window", o.window);
    o.burn_in = j.value("burn_in", o.burn_in);
    o.iterations = j.value("iterations", o.iterations);
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    if (j.contains("subset")) o.subset = physio::param_list_from_json(j.at("subset"));
    o.fit_sigma = j.value("fit_sigma", o.fit_sigma);
    if (o.window < 2 || o.burn_in < 0 || o.iterations < 0 || !(o.learning_rate > 0.0)) {
        throw ConfigError("invalid static window options");
    }
    return o;
}

StaticWindowFit static_window_fit(const data::GriddedSeries& window, const physio::PhysioState& x0,
                                  double meal_mass_mg, const physio::StaticParams& s_init,
                                  const StaticWindowOptions& opts) {
    const std::vector<Param> subset = opts.subset.empty() ? physio::DynamicParams::default_set() : opts.subset;
    const std::size_t T = window.size();
    const std::size_t K = subset.size();
    std::vector<double> meal(T);
    double mm = meal_mass_mg;
    for (std::size_t t = 0; t < T; ++t) meal[t] = mm = physio::next_meal_mass(mm, window.input(t));
    std::size_t n_obs = 0;
    for (std::size_t t = 0; t < T; ++t) n_obs += window.missing(t) ? 0 : 1;

    StaticWindowFit out;
    out.s = s_init;
    if (n_obs == 0) {
        out.ok = false;
        return out;
    }

    // Mean squared error of the static simulator at parameter vector `s`.
    auto rollout_mse = [&](const physio::ParamVec<double>& p) {
        physio::PhysioState x = x0;
        double ss = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            physio::StepOptions so;
            so.meal_mass_mg = meal[t];
            x = physio::euler_step(x, p, window.input(t), data::kStepMinutes, so);
            if (!window.missing(t)) {
                const double r = window.cgm[t] - physio::at(x, Comp::Gs) / physio::at(p, Param::V_G);
                ss += r * r;
            }
        }
        return ss / static_cast<double>(n_obs);
    };

    const double mse0 = rollout_mse(s_init.values);
    if (!std::isfinite(mse0)) {
        out.ok = false;
        out.residual = mse0;
        return out;
    }
    const bool sigma_free = opts.fit_sigma;
    std::vector<double> w(K + (sigma_free ? 1 : 0));
    for (std::size_t k = 0; k < K; ++k) w[k] = std::log(s_init[subset[k]]);
    if (sigma_free) w[K] = std::log(std::max(std::sqrt(mse0), 1.0));

    const ad::LossFn loss = [&](ad::Tape& tape, std::span<const ad::Var> v) {
        physio::ParamVec<ad::Var> p;
        for (std::size_t i = 0; i < physio::kNumParams; ++i) p[i] = tape.constant(s_init.values[i]);
        for (std::size_t k = 0; k < K; ++k) physio::at(p, subset[k]) = ad::exp(v[k]);
        physio::StateVec<ad::Var> x;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = tape.constant(x0[i]);
        ad::Var ss = tape.constant(0.0);
        for (std::size_t t = 0; t < T; ++t) {
            physio::StepOptions so;
            so.meal_mass_mg = meal[t];
            x = physio::euler_step(x, p, window.input(t), data::kStepMinutes, so);
            if (!window.missing(t)) {
                const ad::Var r = window.cgm[t] - physio::at(x, Comp::Gs) / physio::at(p, Param::V_G);
                ss += r * r;
            }
        }
        if (!sigma_free) return ss / (2.0 * static_cast<double>(n_obs));
        const ad::Var log_sigma = v[K];
        return log_sigma + ss * ad::exp(-2.0 * log_sigma) / (2.0 * static_cast<double>(n_obs));
    };

    infer::AdamState adam;
    std::vector<double> best = w;
    double best_loss = std::numeric_limits<double>::infinity();
    for (int it = 0; it < opts.iterations; ++it) {
        const auto g = ad::gradient(loss, w);
        bool finite = std::isfinite(g.value);
        for (double gi : g.gradient) finite = finite && std::isfinite(gi);
        if (!finite) {
            out = StaticWindowFit{s_init, 0.0, std::sqrt(mse0), false, it};
            return out;
        }
        if (g.value < best_loss) {
            best_loss = g.value;
            best = w;
        }
        infer::adam_step(w, g.gradient, adam, opts.learning_rate);
        out.iterations = it + 1;
    }
    if (opts.iterations > 0) {
        const auto g = ad::gradient(loss, w);
        if (std::isfinite(g.value) && g.value < best_loss) best = w;
    }
    for (std::size_t k = 0; k < K; ++k) out.s[subset[k]] = std::exp(best[k]);
    const double mse = rollout_mse(out.s.values);
    if (!std::isfinite(mse)) return StaticWindowFit{s_init, 0.0, std::sqrt(mse0), false, out.iterations};
    out.residual = std::sqrt(mse);
    out.sigma = sigma_free ? std::exp(best[K]) : out.residual;
    return out;
}

// ---- forecaster adapters ---------------------------------------------------------

std::vector<ExogenousInput> resolve_inputs(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                           double basal_u_per_min, const std::vector<ExogenousInput>& future_inputs) {
    const auto h = static_cast<std::size_t>(horizon);
    if (!future_inputs.empty()) {
        if (future_inputs.size() != h) throw DimensionError("future inputs must cover the horizon");
        return future_inputs;
    }
    std::vector<ExogenousInput> u(h);
    for (std::size_t k = 0; k < h; ++k) {
        const std::size_t idx = anchor + 1 + k;
        u[k] = idx < series.size() ? series.input(idx) : ExogenousInput{basal_u_per_min * data::kStepMinutes, 0.0};
    }
    return u;
}

VectorXd NaiveForecaster::forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                   const std::vector<ExogenousInput>&) {
    const std::vector<double> hist(series.cgm.begin(), series.cgm.begin() + static_cast<std::ptrdiff_t>(anchor + 1));
    const auto f = naive_forecast(hist, horizon);
    return Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
}

std::string ArmaForecaster::name() const { return fmt::format("arma_{}_{}", m_.p(), m_.q()); }

VectorXd ArmaForecaster::forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                  const std::vector<ExogenousInput>&) {
    const std::size_t len = std::min<std::size_t>(anchor + 1, static_cast<std::size_t>(history_));
    std::vector<double> hist(series.cgm.begin() + static_cast<std::ptrdiff_t>(anchor + 1 - len),
                             series.cgm.begin() + static_cast<std::ptrdiff_t>(anchor + 1));
    while (!hist.empty() && !observed(hist.front())) hist.erase(hist.begin());
    const auto f = arma_forecast(m_, linear_fill(hist), horizon);
    return Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
}

VectorXd StaticWindowForecaster::forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                          const std::vector<ExogenousInput>& future_inputs) {
    if (anchor >= series.size()) throw ForecastError("anchor lies outside the series");
    const std::size_t W = std::min<std::size_t>(static_cast<std::size_t>(opts_.window), anchor + 1);
    const std::size_t start = anchor + 1 - W;
    const infer::WindowStart ws = infer::replay_to(s_, basal_, series, start, opts_.burn_in);
    const data::GriddedSeries win = series.slice(start, anchor + 1);
    last_ = static_window_fit(win, ws.x, ws.meal_mass_mg, s_, opts_);
    const auto u = resolve_inputs(series, anchor, horizon, basal_, future_inputs);

    physio::Simulator sim(ws.x);
    sim.set_meal_mass_mg(ws.meal_mass_mg);
    VectorXd out(horizon);
    try {
        for (std::size_t t = 0; t < W; ++t) sim.step(last_.s.values, win.input(t));
        for (int k = 0; k < horizon; ++k) out(k) = physio::cgm_observe(sim.step(last_.s.values, u[static_cast<std::size_t>(k)]), last_.s);
    } catch (const DivergenceError& e) {
        throw ForecastError(std::string("static simulator diverged: ") + e.what());
    }
    return out;
}

VectorXd DtdForecaster::forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                 const std::vector<ExogenousInput>& future_inputs) {
    const auto ap = forecast::condition(f_, series, anchor, cond_);
    forecast::ForecastRequest req;
    req.horizon = horizon;
    req.samples = samples_;
    req.seed = seed_;
    req.future_inputs = resolve_inputs(series, anchor, horizon, f_.basal_u_per_min, future_inputs);
    req = forecast::complete_request(f_, series, anchor, std::move(req));
    last_ = forecast::point_forecast(ap, req);
    return last_.mean;
}

ExternalForecaster::ExternalForecaster(std::string name, const std::string& csv_path) : name_(std::move(name)) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open " + csv_path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("anchor_timestamp,step,value", 0) != 0) {
        throw DataError(csv_path + ": expected header anchor_timestamp,step,value");
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string ts, step, value;
        if (!std::getline(ss, ts, ',') || !std::getline(ss, step, ',') || !std::getline(ss, value)) {
            throw DataError(fmt::format("{}:{}: expected three columns", csv_path, lineno));
        }
        try {
            table_[data::parse_iso8601(ts).epoch][std::stoi(step)] = std::stod(value);
        } catch (const std::logic_error&) {
            throw DataError(fmt::format("{}:{}: malformed row", csv_path, lineno));
        }
    }
}

VectorXd ExternalForecaster::forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                      const std::vector<ExogenousInput>&) {
    const std::int64_t epoch = series.start + static_cast<std::int64_t>(anchor) * data::kStepSeconds;
    const auto it = table_.find(epoch);
    if (it == table_.end()) {
        throw ForecastError(name_ + ": no forecast for anchor " + data::format_iso8601(epoch, series.tz_offset_minutes));
    }
    VectorXd out(horizon);
    for (int k = 1; k <= horizon; ++k) {
        const auto s = it->second.find(k);
        if (s == it->second.end()) throw ForecastError(fmt::format("{}: anchor lacks step {}", name_, k));
        out(k - 1) = s->second;
    }
    return out;
}

void write_external_csv(const std::string& path, const data::GriddedSeries& series,
                        const std::vector<std::size_t>& anchors, const std::vector<VectorXd>& forecasts) {
    if (anchors.size() != forecasts.size()) throw DimensionError("one forecast per anchor expected");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "anchor_timestamp,step,value\n";
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const std::string ts = data::format_iso8601(
            series.start + static_cast<std::int64_t>(anchors[i]) * data::kStepSeconds, series.tz_offset_minutes);
        for (Eigen::Index k = 0; k < forecasts[i].size(); ++k) out << ts << ',' << k + 1 << ',' << fmt::format("{}", forecasts[i](k)) << '\n';
    }
}

}  // namespace dtdsim::baselines
