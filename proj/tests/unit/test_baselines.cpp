#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <limits>
#include <numbers>
#include <vector>

#include "dtdsim/baselines.hpp"
#include "dtdsim/data_io.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/inference.hpp"
#include "dtdsim/rng.hpp"

using namespace dtdsim;
using namespace dtdsim::baselines;
namespace fs = std::filesystem;

namespace {

std::vector<double> simulate_arma(const std::vector<double>& phi, const std::vector<double>& theta, double mu,
                                  double sd, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t burn = 200;
    std::vector<double> x(n + burn, 0.0), e(n + burn, 0.0);
    for (std::size_t t = 0; t < n + burn; ++t) {
        e[t] = sd * rng.normal();
        double v = e[t];
        for (std::size_t i = 1; i <= phi.size() && i <= t; ++i) v += phi[i - 1] * x[t - i];
        for (std::size_t j = 1; j <= theta.size() && j <= t; ++j) v += theta[j - 1] * e[t - j];
        x[t] = v;
    }
    std::vector<double> y(x.begin() + burn, x.end());
    for (double& v : y) v += mu;
    return y;
}

data::SynthResult noise_free_day() {
    data::SynthSpec spec;
    spec.trajectory.which.clear();
    spec.trajectory.amplitude.clear();
    spec.sigma = 0.0;
    spec.days = 1;
    spec.seed = 4;
    spec.meal_time_jitter_min = 0.0;
    spec.carb_jitter_frac = 0.0;
    return data::synthesize(physio::load_default_params(), spec);
}

}  // namespace

TEST_CASE("inverse roots of a quadratic") {
    // 1 - 1.1 L + 0.3 L^2 has inverse roots 0.5 and 0.6.
    auto r = inverse_roots({1.1, -0.3});
    REQUIRE(r.size() == 2);
    std::sort(r.begin(), r.end(), [](auto a, auto b) { return a.real() < b.real(); });
    CHECK(r[0].real() == doctest::Approx(0.5));
    CHECK(r[1].real() == doctest::Approx(0.6));

    // Complex pair: z^2 - c1 z - c2 with c1 = 1, c2 = -0.5.
    const auto c = inverse_roots({1.0, -0.5});
    const std::complex<double> disc = std::sqrt(std::complex<double>(1.0 - 2.0, 0.0));
    for (const auto& z : c) {
        const bool hit = std::abs(z - (1.0 + disc) / 2.0) < 1e-12 || std::abs(z - (1.0 - disc) / 2.0) < 1e-12;
        CHECK(hit);
    }
    CHECK(inverse_roots({}).empty());
}

TEST_CASE("root reflection yields a stationary polynomial") {
    CHECK(reflect_roots({0.4})[0] == 0.4);
    CHECK(reflect_roots({2.0})[0] == doctest::Approx(0.5));
    const auto unit = reflect_roots({1.0});
    CHECK(std::abs(unit[0]) < 1.0);
    Rng rng(8);
    for (int k = 0; k < 200; ++k) {
        std::vector<double> c{3.0 * rng.normal(), 3.0 * rng.normal(), 3.0 * rng.normal()};
        for (const auto& z : inverse_roots(reflect_roots(c))) CHECK(std::abs(z) < 1.0);
    }
}

TEST_CASE("ARMA recursion matches a hand-written filter") {
    ArmaModel m;
    m.phi = {0.6};
    m.theta = {0.3};
    m.intercept = 10.0;
    m.variance = 2.0;
    const std::vector<double> y{11.0, 9.5, 12.0, 10.2, 8.7, 10.0};

    std::vector<double> e(y.size()), pred(y.size());
    for (std::size_t t = 0; t < y.size(); ++t) {
        const double prev_x = t > 0 ? y[t - 1] - 10.0 : 0.0;
        const double prev_e = t > 0 ? e[t - 1] : 0.0;
        pred[t] = 10.0 + 0.6 * prev_x + 0.3 * prev_e;
        e[t] = y[t] - pred[t];
    }
    const auto res = arma_residuals(m, y);
    const auto one = arma_one_step(m, y);
    double ll = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        CHECK(res[t] == doctest::Approx(e[t]).epsilon(1e-12));
        CHECK(one[t] == doctest::Approx(pred[t]).epsilon(1e-12));
        if (t >= 1) ll += -0.5 * std::log(2.0 * std::numbers::pi * 2.0) - e[t] * e[t] / 4.0;
    }
    CHECK(arma_loglik(m, y) == doctest::Approx(ll).epsilon(1e-12));

    // The first step carries the last innovation, later steps decay with phi.
    const auto f = arma_forecast(m, y, 5);
    double x = 0.6 * (y.back() - 10.0) + 0.3 * e.back();
    CHECK(f[0] == doctest::Approx(10.0 + x).epsilon(1e-12));
    for (int h = 1; h < 5; ++h) {
        x *= 0.6;
        CHECK(f[static_cast<std::size_t>(h)] == doctest::Approx(10.0 + x).epsilon(1e-12));
    }
    m.variance = 0.0;
    CHECK_THROWS_AS(arma_loglik(m, y), UndefinedMetricError);
}

TEST_CASE("AR(1) forecast decays geometrically to the mean") {
    ArmaModel m;
    m.phi = {0.8};
    m.intercept = 100.0;
    m.variance = 1.0;
    const auto f = arma_forecast(m, {90.0, 130.0}, 12);
    for (int h = 1; h <= 12; ++h) CHECK(f[static_cast<std::size_t>(h - 1)] == doctest::Approx(100.0 + std::pow(0.8, h) * 30.0));
    CHECK_THROWS_AS(arma_forecast(m, {}, 3), DimensionError);
}

TEST_CASE("AR(1) parameters are recovered") {
    const auto y = simulate_arma({0.7}, {}, 120.0, 2.0, 3000, 17);
    const auto m = arma_fit(y, 1, 0);
    CHECK(m.phi[0] == doctest::Approx(0.7).epsilon(0.05));
    CHECK(m.intercept == doctest::Approx(120.0).epsilon(0.01));
    CHECK(m.variance == doctest::Approx(4.0).epsilon(0.1));
    CHECK_THROWS_AS(arma_fit(std::vector<double>(15, 1.0), 1, 1), DimensionError);
    CHECK_THROWS_AS(arma_fit(y, -1, 0), DimensionError);
}

TEST_CASE("ARMA(1,1) fit stays invertible and improves on white noise") {
    const auto y = simulate_arma({0.5}, {0.4}, 0.0, 1.0, 2000, 23);
    const auto m = arma_fit(y, 1, 1);
    CHECK(std::abs(m.phi[0]) < 1.0);
    CHECK(std::abs(m.theta[0]) < 1.0);
    CHECK(m.phi[0] == doctest::Approx(0.5).epsilon(0.2));
    CHECK(m.theta[0] == doctest::Approx(0.4).epsilon(0.25));
    const auto wn = arma_fit(y, 0, 0);
    CHECK(arma_loglik(m, y) > arma_loglik(wn, y));
}

TEST_CASE("order selection by validation error") {
    const auto y = simulate_arma({0.9}, {}, 50.0, 1.0, 1500, 31);
    const std::vector<double> train(y.begin(), y.begin() + 1200), valid(y.begin() + 1200, y.end());
    const auto sel = arma_grid(train, valid, 1, 1);
    CHECK(sel.validation_mae.size() == 4);
    const double best = std::min_element(sel.validation_mae.begin(), sel.validation_mae.end(),
                                         [](const auto& a, const auto& b) { return a.second < b.second; })
                            ->second;
    CHECK(sel.validation_mae.at("0,0") > best);
    CHECK(sel.model.p() >= 1);
    CHECK_THROWS_AS(arma_grid(train, {}, 1, 1), DataError);
}

TEST_CASE("naive forecast repeats the last observation") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto f = naive_forecast({100.0, 110.0, nan, nan}, 4);
    CHECK(f == std::vector<double>(4, 110.0));
    CHECK_THROWS_AS(naive_forecast({nan, nan}, 3), DataError);

    const auto r = noise_free_day();
    NaiveForecaster nf;
    const auto v = nf.forecast(r.series, 50, 6);
    for (Eigen::Index k = 0; k < v.size(); ++k) CHECK(v(k) == r.series.cgm[50]);
}

TEST_CASE("input resolution") {
    const auto r = noise_free_day();
    const std::size_t n = r.series.size();
    const auto u = resolve_inputs(r.series, n - 3, 5, 0.02, {});
    REQUIRE(u.size() == 5);
    CHECK(u[0].insulin_units == r.series.insulin[n - 2]);
    CHECK(u[1].insulin_units == r.series.insulin[n - 1]);
    CHECK(u[2].insulin_units == doctest::Approx(0.1));
    CHECK(u[4].carb_grams == 0.0);
    const std::vector<physio::ExogenousInput> given(5, {1.0, 2.0});
    CHECK(resolve_inputs(r.series, 0, 5, 0.02, given)[3].carb_grams == 2.0);
    CHECK_THROWS_AS(resolve_inputs(r.series, 0, 4, 0.02, given), DimensionError);
}

TEST_CASE("static window fit recovers perturbed parameters on noise-free data") {
    const auto r = noise_free_day();
    const auto s_true = r.truth.s;
    const std::size_t start = 140, end = 230;  // spans the lunch meal
    const auto win = r.series.slice(start, end);
    const double basal = data::estimate_basal_rate(r.series);
    const auto ws = infer::replay_to(s_true, basal, r.series, start, 72);
    physio::PhysioState x0;
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = r.truth.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(start - 1));

    physio::StaticParams s_init = s_true;
    s_init[physio::Param::V_mx] *= 1.25;
    s_init[physio::Param::k_abs] *= 0.8;
    StaticWindowOptions o;
    o.iterations = 300;
    const auto fit = static_window_fit(win, x0, ws.meal_mass_mg, s_init, o);
    CHECK(fit.ok);
    CHECK(fit.iterations == 300);

    double rmse0 = 0.0;
    {
        physio::Simulator sim(x0);
        sim.set_meal_mass_mg(ws.meal_mass_mg);
        for (std::size_t t = 0; t < win.size(); ++t) {
            const double g = physio::cgm_observe(sim.step(s_init.values, win.input(t)), s_init);
            rmse0 += (g - win.cgm[t]) * (g - win.cgm[t]);
        }
        rmse0 = std::sqrt(rmse0 / static_cast<double>(win.size()));
    }
    CHECK(fit.residual < 0.2 * rmse0);
    CHECK(fit.s[physio::Param::V_mx] == doctest::Approx(s_true[physio::Param::V_mx]).epsilon(0.1));

    StaticWindowOptions none = o;
    none.iterations = 0;
    const auto idle = static_window_fit(win, x0, ws.meal_mass_mg, s_init, none);
    CHECK(idle.residual == doctest::Approx(rmse0).epsilon(1e-9));
    CHECK(idle.s[physio::Param::V_mx] == doctest::Approx(s_init[physio::Param::V_mx]).epsilon(1e-14));

    CHECK_THROWS_AS(StaticWindowOptions::from_json({{"window", 1}}), ConfigError);
    CHECK_THROWS_AS(StaticWindowOptions::from_json({{"iters", 3}}), ConfigError);
}

TEST_CASE("static window forecaster runs end to end") {
    const auto r = noise_free_day();
    StaticWindowOptions o;
    o.iterations = 20;
    o.window = 36;
    StaticWindowForecaster sf(r.truth.s, data::estimate_basal_rate(r.series), o);
    const auto f = sf.forecast(r.series, 200, 12);
    CHECK(sf.last_fit().ok);
    for (Eigen::Index k = 0; k < f.size(); ++k) {
        CHECK(std::isfinite(f(k)));
        CHECK(f(k) == doctest::Approx(r.series.cgm[200 + static_cast<std::size_t>(k) + 1]).epsilon(0.05));
    }
    CHECK_THROWS_AS(sf.forecast(r.series, r.series.size(), 3), ForecastError);
}

TEST_CASE("external forecasts round trip through CSV") {
    const auto r = noise_free_day();
    const std::vector<std::size_t> anchors{10, 40};
    std::vector<VectorXd> fc(2, VectorXd(3));
    fc[0] << 101.5, 102.25, 1.0 / 3.0;
    fc[1] << 90.0, 91.0, 92.0;
    const auto path = (fs::temp_directory_path() / "dtdsim_unit_external.csv").string();
    write_external_csv(path, r.series, anchors, fc);
    ExternalForecaster ext("mine", path);
    CHECK(ext.name() == "mine");
    CHECK(ext.forecast(r.series, 10, 3) == fc[0]);
    CHECK(ext.forecast(r.series, 40, 2) == fc[1].head(2));
    CHECK_THROWS_AS(ext.forecast(r.series, 11, 3), ForecastError);
    CHECK_THROWS_AS(ext.forecast(r.series, 10, 4), ForecastError);
    CHECK_THROWS_AS(write_external_csv(path, r.series, anchors, {fc[0]}), DimensionError);
    CHECK_THROWS_AS(ExternalForecaster("x", path + ".missing"), DataError);
}

TEST_CASE("ARMA JSON round trip") {
    ArmaModel m;
    m.phi = {0.2, -0.1};
    m.theta = {0.3};
    m.intercept = 4.0;
    m.variance = 1.5;
    const auto back = ArmaModel::from_json(m.to_json());
    CHECK(back.phi == m.phi);
    CHECK(back.theta == m.theta);
    CHECK(back.variance == 1.5);
    auto j = m.to_json();
    j["variance"] = -1.0;
    CHECK_THROWS_AS(ArmaModel::from_json(j), ConfigError);
}
