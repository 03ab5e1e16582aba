#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdsim/baselines.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/eval_metrics.hpp"
#include "dtdsim/rng.hpp"

using namespace dtdsim;
using namespace dtdsim::eval;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

data::GriddedSeries random_walk(std::size_t n, std::uint64_t seed, double gap_prob = 0.0) {
    auto s = data::GriddedSeries::empty(1704067200, n);
    Rng rng(seed);
    double g = 130.0;
    for (std::size_t t = 0; t < n; ++t) {
        g = std::clamp(g + 4.0 * rng.normal(), 40.0, 400.0);
        s.cgm[t] = rng.uniform() < gap_prob ? kNaN : g;
    }
    return s;
}

std::vector<double> b7() { return {101.3, 99.7, 140.2, 180.9, 75.5, 88.8, 120.0}; }

const MetricRow& row(const std::vector<MetricRow>& rows, int horizon_min, const std::string& ctx) {
    for (const auto& r : rows)
        if (r.horizon_min == horizon_min && r.context == ctx) return r;
    throw std::runtime_error("row not found");
}

}  // namespace

TEST_CASE("point metrics against direct sums") {
    const std::vector<double> p{1.0, 2.0, kNaN, 4.0, 10.0};
    const std::vector<double> y{2.0, 2.0, 5.0, kNaN, 7.0};
    CHECK(mae(p, y) == doctest::Approx((1.0 + 0.0 + 3.0) / 3.0));
    CHECK(rmse(p, y) == doctest::Approx(std::sqrt((1.0 + 0.0 + 9.0) / 3.0)));
    CHECK(mase(p, y, 2.0) == doctest::Approx(4.0 / 3.0 / 2.0));
    CHECK_THROWS_AS(mae(std::vector<double>{kNaN}, std::vector<double>{1.0}), UndefinedMetricError);
    CHECK_THROWS_AS(mae(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), DimensionError);
    CHECK_THROWS_AS(mase(p, y, 0.0), UndefinedMetricError);

    const std::vector<double> z{1.0, 4.0, 2.0, 8.0};
    CHECK(naive_scale(z, 1) == doctest::Approx((3.0 + 2.0 + 6.0) / 3.0));
    CHECK(naive_scale(z, 2) == doctest::Approx((1.0 + 4.0) / 2.0));
    CHECK_THROWS_AS(naive_scale(std::vector<double>(5, 3.0), 1), UndefinedMetricError);
    CHECK_THROWS_AS(naive_scale(z, 4), UndefinedMetricError);
}

TEST_CASE("correlation") {
    const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> b{2.0, 4.1, 5.9, 8.0};
    const std::vector<double> c{4.0, 3.0, 2.0, 1.0};
    CHECK(*forecast_correlation(a, b) > 0.99);
    CHECK(*forecast_correlation(a, c) == doctest::Approx(-1.0));
    CHECK_FALSE(forecast_correlation(a, std::vector<double>(4, 2.0)).has_value());
    CHECK_FALSE(forecast_correlation(std::vector<double>(7, 134.15847838291646), b7()).has_value());
    CHECK_FALSE(forecast_correlation(std::vector<double>{kNaN, 1.0, 1.0, 1.0}, a).has_value());
    CHECK_FALSE(forecast_correlation(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0, 3.0}).has_value());
}

TEST_CASE("RMSE dominates MAE") {
    Rng rng(3);
    for (int k = 0; k < 500; ++k) {
        std::vector<double> p(20), y(20);
        for (std::size_t i = 0; i < 20; ++i) {
            p[i] = 100.0 + 30.0 * rng.normal();
            y[i] = 100.0 + 30.0 * rng.normal();
        }
        CHECK(rmse(p, y) >= mae(p, y));
    }
}

TEST_CASE("night and day partition the anchors") {
    auto s = random_walk(2 * 288, 1);
    s.carbs[100] = 50.0;
    s.bolus[100] = 5.0;
    s.cgm[300] = 60.0;
    s.cgm[301] = 220.0;
    int nights = 0;
    for (std::size_t a = 0; a < s.size(); ++a) {
        const auto c = contexts_of(s, a);
        CHECK(c.front() == Context::Anytime);
        const bool night = std::find(c.begin(), c.end(), Context::Night) != c.end();
        const bool day = std::find(c.begin(), c.end(), Context::Day) != c.end();
        CHECK(night != day);
        CHECK(night == (s.minute_of_day(a) < 360.0));
        nights += night ? 1 : 0;
    }
    CHECK(nights == 2 * 72);
    auto has = [&](std::size_t a, Context x) {
        const auto c = contexts_of(s, a);
        return std::find(c.begin(), c.end(), x) != c.end();
    };
    CHECK(has(100, Context::RecentMeal));
    CHECK(has(111, Context::RecentMeal));
    CHECK_FALSE(has(112, Context::RecentMeal));
    CHECK_FALSE(has(99, Context::RecentMeal));
    CHECK(has(105, Context::RecentBolus));
    CHECK(has(300, Context::Hypo));
    CHECK(has(301, Context::Hyper));

    ContextSpec wrap;
    wrap.night_start_minute = 1320.0;
    wrap.night_end_minute = 360.0;
    CHECK(std::find(contexts_of(s, 280, wrap).begin(), contexts_of(s, 280, wrap).end(), Context::Night) !=
          contexts_of(s, 280, wrap).end());
}

TEST_CASE("anchor sampling") {
    EvalOptions o;
    o.horizons = {12, 36};
    o.n_anchors = 50;
    o.seed = 9;
    const auto a = sample_anchors(100, 1000, o);
    CHECK(a.size() == 50);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    for (auto x : a) {
        CHECK(x >= 100);
        CHECK(x + 36 < 1000);
    }
    CHECK(sample_anchors(100, 1000, o) == a);
    o.seed = 10;
    CHECK(sample_anchors(100, 1000, o) != a);
    o.n_anchors = 0;
    CHECK(sample_anchors(10, 20, o).size() == 9);
    o.n_anchors = 5;
    CHECK_THROWS_AS(sample_anchors(10, 40, o), DataError);
}

TEST_CASE("naive forecaster scores MASE of exactly one on full coverage") {
    const auto s = random_walk(3 * 288, 5);
    EvalOptions o;
    o.horizons = {1, 6, 36, 72};
    o.n_anchors = 0;
    baselines::NaiveForecaster nf;
    const auto rows = evaluate(nf, s, 288, 3 * 288, o);
    for (int h : o.horizons) {
        const auto& r = row(rows, h * 5, "anytime");
        REQUIRE(r.mase);
        CHECK(*r.mase == 1.0);
    }
}

TEST_CASE("endpoint scores match a brute-force evaluation") {
    Rng rng(77);
    for (int fixture = 0; fixture < 40; ++fixture) {
        const std::size_t n = 200 + static_cast<std::size_t>(rng.integer(0, 200));
        const auto s = random_walk(n, 1000 + static_cast<std::uint64_t>(fixture), 0.05);
        const std::size_t begin = static_cast<std::size_t>(rng.integer(0, 50));
        const std::size_t end = n - static_cast<std::size_t>(rng.integer(0, 20));
        const int H = 12;
        AnchorForecasts fc;
        fc.model = "m";
        for (std::size_t a = begin; a < end; a += 7) {
            fc.anchors.push_back(a);
            Eigen::VectorXd p(H);
            for (int k = 0; k < H; ++k) p(k) = 130.0 + 20.0 * rng.normal();
            fc.paths.push_back(p);
        }
        EvalOptions o;
        o.horizons = {1, 5, 12};
        const auto rows = score(fc, s, begin, end, o);
        for (int h : o.horizons) {
            double scale_sum = 0.0;
            int scale_n = 0;
            for (std::size_t t = begin + static_cast<std::size_t>(h); t < end; ++t) {
                const double a = s.cgm[t], b = s.cgm[t - static_cast<std::size_t>(h)];
                if (std::isnan(a) || std::isnan(b)) continue;
                scale_sum += std::abs(a - b);
                ++scale_n;
            }
            double abs_sum = 0.0, sq_sum = 0.0;
            int cnt = 0;
            for (std::size_t i = 0; i < fc.anchors.size(); ++i) {
                const std::size_t target = fc.anchors[i] + static_cast<std::size_t>(h);
                if (target >= end || std::isnan(s.cgm[target])) continue;
                const double e = fc.paths[i](h - 1) - s.cgm[target];
                abs_sum += std::abs(e);
                sq_sum += e * e;
                ++cnt;
            }
            const auto& r = row(rows, h * 5, "anytime");
            REQUIRE(r.n == static_cast<std::size_t>(cnt));
            REQUIRE(r.mae);
            CHECK(*r.mae == doctest::Approx(abs_sum / cnt).epsilon(1e-12));
            CHECK(*r.rmse == doctest::Approx(std::sqrt(sq_sum / cnt)).epsilon(1e-12));
            CHECK(*r.mase == doctest::Approx(abs_sum / cnt / (scale_sum / scale_n)).epsilon(1e-12));
            CHECK(*r.rmse >= *r.mae);
        }
    }
}

TEST_CASE("failing forecasters drop anchors") {
    const auto s = random_walk(300, 2);
    const auto path = (fs::temp_directory_path() / "dtdsim_unit_eval_ext.csv").string();
    std::vector<Eigen::VectorXd> f(1, Eigen::VectorXd::Constant(6, 120.0));
    baselines::write_external_csv(path, s, {50}, f);
    baselines::ExternalForecaster ext("ext", path);
    const auto fc = collect_forecasts(ext, s, {50, 60, 70}, 6);
    CHECK(fc.anchors == std::vector<std::size_t>{50});
    CHECK(fc.failed == 2);
}

TEST_CASE("metric CSV and options") {
    std::vector<MetricRow> rows(1);
    rows[0].model = "naive";
    rows[0].horizon_min = 30;
    rows[0].context = "night";
    rows[0].n = 4;
    rows[0].mae = 1.5;
    rows[0].rmse = 2.0;
    const auto path = (fs::temp_directory_path() / "dtdsim_unit_metrics.csv").string();
    write_metric_csv(path, rows);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "model,horizon_min,context,n,mae,rmse,mase,corr");
    std::getline(in, line);
    CHECK(line == "naive,30,night,4,1.500000,2.000000,,");

    EvalOptions o;
    o.horizons = {36, 72};
    const auto back = EvalOptions::from_json(o.to_json());
    CHECK(back.horizons == o.horizons);
    CHECK(back.max_horizon() == 72);
    CHECK(EvalOptions{}.max_horizon() == 72);
    CHECK_THROWS_AS(EvalOptions::from_json({{"horizons", {0}}}), ConfigError);
    CHECK_THROWS_AS(EvalOptions::from_json({{"anchors", 3}}), ConfigError);
}
