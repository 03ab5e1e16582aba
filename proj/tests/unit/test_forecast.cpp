#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include "dtdsim/data_io.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/forecast.hpp"
#include "dtdsim/inference.hpp"
#include "dtdsim/rng.hpp"

using namespace dtdsim;
using namespace dtdsim::forecast;
namespace fs = std::filesystem;

namespace {

struct Setup {
    physio::StaticParams s = physio::load_default_params();
    data::SynthResult r;
    infer::Fitted f;

    // An unfitted model: with a zero output layer the link returns the
    // static parameters whatever the latent path is.
    explicit Setup(double w3_scale = 0.0) {
        data::SynthSpec spec;
        spec.days = 2;
        spec.seed = 12;
        r = data::synthesize(s, spec);
        f.config.latent_dim = 2;
        f.config.k_set = {physio::Param::V_mx};
        f.scaling = infer::covariate_scaling(r.series);
        f.basal_u_per_min = data::estimate_basal_rate(r.series);
        f.x0 = infer::initial_state(s, f.basal_u_per_min, r.series);
        f.model = infer::init_model(s, f.config, latent::kDefaultCovariates);
        f.model.sigma = 5.0;
        Rng rng(1);
        for (Eigen::Index i = 0; i < f.model.net.W3.size(); ++i) f.model.net.W3.data()[i] = w3_scale * rng.normal();
        f.posterior = infer::VariationalPosterior::standard(2, static_cast<Eigen::Index>(r.series.size()), 0.1);
    }

    ConditioningOptions quick() const {
        ConditioningOptions o;
        o.iterations = 20;
        o.prior_steps = 200;
        return o;
    }
};

}  // namespace

TEST_CASE("type-7 quantiles") {
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.5) == doctest::Approx(2.5));
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.0) == 1.0);
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 1.0) == 4.0);
    CHECK(quantile({7.0}, 0.975) == 7.0);
    std::vector<double> v;
    for (int i = 0; i <= 100; ++i) v.push_back(static_cast<double>(100 - i));
    CHECK(quantile(v, 0.025) == doctest::Approx(2.5));
    CHECK_THROWS_AS(quantile({}, 0.5), UndefinedMetricError);
}

TEST_CASE("scenario inputs place events on the grid") {
    Scenario sc{"x", {{0.0, 10.0, 0.0}, {12.0, 0.0, 2.0}, {14.9, 5.0, 0.0}, {500.0, 1.0, 1.0}}};
    const auto u = scenario_inputs(sc, 0.01, 12);
    REQUIRE(u.size() == 12);
    CHECK(u[0].carb_grams == 10.0);
    CHECK(u[2].insulin_units == doctest::Approx(0.05 + 2.0));
    CHECK(u[2].carb_grams == 5.0);
    CHECK(u[5].insulin_units == doctest::Approx(0.05));
    CHECK(u[11].carb_grams == 0.0);
    Scenario bad{"bad", {{-5.0, 1.0, 0.0}}};
    CHECK_THROWS_AS(scenario_inputs(bad, 0.01, 12), ConfigError);

    const auto grid = meal_bolus_grid();
    REQUIRE(grid.size() == 4);
    CHECK(grid[0].name == "no_meal_no_bolus");
    CHECK(grid[3].events[0].carbs_g == 50.0);
    CHECK(grid[3].events[0].bolus_u == 8.0);

    const auto parsed = scenarios_from_json(nlohmann::json::parse(
        R"({"scenarios":[{"name":"a","events":[{"offset_minutes":30,"carbs_g":40}]},{"name":"b"}]})"));
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].events[0].carbs_g == 40.0);
    CHECK(parsed[0].events[0].bolus_u == 0.0);
    CHECK(parsed[1].events.empty());
    CHECK_THROWS(scenarios_from_json(nlohmann::json::parse(R"({"scenarios":[]})")));
}

TEST_CASE("request completion uses recorded inputs, then basal") {
    Setup st;
    const std::size_t anchor = st.r.series.size() - 10;
    ForecastRequest req;
    req.horizon = 20;
    const auto full = complete_request(st.f, st.r.series, anchor, req);
    REQUIRE(full.future_inputs.size() == 20);
    for (std::size_t k = 0; k < 9; ++k) CHECK(full.future_inputs[k].insulin_units == st.r.series.insulin[anchor + 1 + k]);
    for (std::size_t k = 9; k < 20; ++k) {
        CHECK(full.future_inputs[k].insulin_units == doctest::Approx(st.f.basal_u_per_min * 5.0));
        CHECK(full.future_inputs[k].carb_grams == 0.0);
    }
    // Time of day keeps running past the end of the series.
    const double mod = std::fmod(st.r.series.minute_of_day(anchor) + 5.0 * 20.0, 1440.0);
    CHECK(full.future_covariates(0, 19) == doctest::Approx(std::sin(2.0 * std::numbers::pi * mod / 1440.0)).epsilon(1e-9));
    CHECK(full.future_covariates.cols() == 20);

    req.horizon = 0;
    CHECK_THROWS_AS(complete_request(st.f, st.r.series, anchor, req), ConfigError);
}

TEST_CASE("static link forecast equals the deterministic simulator rollout") {
    Setup st;
    const std::size_t anchor = 400;
    const auto ap = condition(st.f, st.r.series, anchor, st.quick());
    CHECK(ap.anchor == anchor);
    CHECK(ap.window_start == anchor + 1 - 72);
    REQUIRE(ap.q.length() == 72);

    ForecastRequest req;
    req.horizon = 36;
    req.samples = 30;
    req.seed = 3;
    req = complete_request(st.f, st.r.series, anchor, req);
    const auto res = point_forecast(ap, req);
    CHECK(res.rejected == 0);

    physio::Simulator sim(ap.x_start);
    sim.set_meal_mass_mg(ap.meal_mass_start);
    for (const auto& u : ap.inputs) sim.step(st.s.values, u);
    for (int k = 0; k < req.horizon; ++k) {
        const double g = physio::cgm_observe(sim.step(st.s.values, req.future_inputs[static_cast<std::size_t>(k)]), st.s);
        CHECK(res.mean(k) == doctest::Approx(g).epsilon(1e-10));
        CHECK(res.lo95(k) == doctest::Approx(g).epsilon(1e-10));
        CHECK(res.hi95(k) == doctest::Approx(g).epsilon(1e-10));
    }
}

TEST_CASE("window inputs are the recorded inputs and the start state is pinned") {
    Setup st;
    const std::size_t anchor = 300;
    const auto ap = condition(st.f, st.r.series, anchor, st.quick());
    for (std::size_t t = 0; t < ap.inputs.size(); ++t) {
        CHECK(ap.inputs[t].insulin_units == st.r.series.insulin[ap.window_start + t]);
        CHECK(ap.inputs[t].carb_grams == st.r.series.carbs[ap.window_start + t]);
    }
    CHECK(physio::cgm_observe(ap.x_start, st.s) == doctest::Approx(st.r.series.cgm[ap.window_start - 1]));

    // Near the series start the window shrinks to what is available.
    const auto early = condition(st.f, st.r.series, 10, st.quick());
    CHECK(early.window_start == 0);
    CHECK(early.q.length() == 11);
    CHECK_THROWS_AS(condition(st.f, st.r.series, st.r.series.size(), st.quick()), ForecastError);
}

TEST_CASE("common random numbers and scenario ordering") {
    Setup st(0.05);
    const std::size_t anchor = 330;
    const auto ap = condition(st.f, st.r.series, anchor, st.quick());
    ForecastRequest req;
    req.horizon = 48;
    req.samples = 40;
    req.seed = 5;
    req = complete_request(st.f, st.r.series, anchor, req);

    const auto a = point_forecast(ap, req);
    const auto b = point_forecast(ap, req);
    CHECK(a.mean == b.mean);
    CHECK(posterior_predictive_sample(ap, req, 7) == posterior_predictive_sample(ap, req, 7));
    CHECK(posterior_predictive_sample(ap, req, 7) != posterior_predictive_sample(ap, req, 8));

    const auto cf = counterfactual_forecast(ap, st.f.basal_u_per_min, req, meal_bolus_grid());
    REQUIRE(cf.size() == 4);
    const auto& base = cf.at("no_meal_no_bolus").mean;
    const auto& meal = cf.at("meal_no_bolus").mean;
    const auto& bolus = cf.at("no_meal_bolus").mean;
    CHECK(meal.mean() > base.mean());
    CHECK(bolus.mean() < base.mean());
    for (Eigen::Index k = 0; k < base.size(); ++k) {
        CHECK(a.lo95(k) <= a.mean(k));
        CHECK(a.hi95(k) >= a.mean(k));
    }
    CHECK_THROWS_AS(counterfactual_forecast(ap, st.f.basal_u_per_min, req, {{"x", {}}, {"x", {}}}), ConfigError);

    ForecastRequest incomplete;
    incomplete.horizon = 5;
    CHECK_THROWS_AS(posterior_predictive_sample(ap, incomplete, 0), DimensionError);
}

TEST_CASE("forecast CSV layout") {
    Setup st;
    ForecastResult r;
    r.mean = Eigen::VectorXd::Constant(3, 120.0);
    r.lo95 = Eigen::VectorXd::Constant(3, 100.0);
    r.hi95 = Eigen::VectorXd::Constant(3, 140.5);
    const auto path = (fs::temp_directory_path() / "dtdsim_unit_forecast.csv").string();
    write_forecast_csv(path, st.r.series, 0, r);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "timestamp,mean,lo95,hi95");
    std::getline(in, line);
    CHECK(line == "2024-01-01T00:05:00+00:00,120.000000,100.000000,140.500000");
}

TEST_CASE("conditioning options parsing") {
    ConditioningOptions o;
    o.window = 36;
    const auto back = ConditioningOptions::from_json(o.to_json());
    CHECK(back.window == 36);
    CHECK_THROWS_AS(ConditioningOptions::from_json({{"windw", 3}}), ConfigError);
}
