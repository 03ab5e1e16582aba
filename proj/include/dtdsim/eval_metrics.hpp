#pragma once

// Forecast scoring: point-error metrics, path correlation and the
// horizon x context evaluation table.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtdsim/baselines.hpp"
#include "dtdsim/data_io.hpp"

namespace dtdsim::eval {

/// Pairs where either side is NaN are skipped. UndefinedMetricError when no
/// pair remains, DimensionError on a length mismatch.
double mae(std::span<const double> pred, std::span<const double> truth);
double rmse(std::span<const double> pred, std::span<const double> truth);

/// MAE0(h): mean |y_t - y_{t-h}| over the series. UndefinedMetricError when
/// it is zero or has no pairs.
double naive_scale(std::span<const double> y, int h);

/// MAE divided by the naive scale.
double mase(std::span<const double> pred, std::span<const double> truth, double scale);

/// Pearson correlation; empty with fewer than 3 pairs or a constant side.
std::optional<double> forecast_correlation(std::span<const double> pred, std::span<const double> truth);

enum class Context { Anytime, Night, Day, RecentMeal, RecentBolus, Hypo, Hyper };

std::string_view context_name(Context c) noexcept;
const std::vector<Context>& all_contexts();

struct ContextSpec {
    double night_start_minute = 0.0;
    double night_end_minute = 360.0;
    double meal_window_minutes = 60.0;
    double bolus_window_minutes = 60.0;
    double hypo_mg_dl = 70.0;
    double hyper_mg_dl = 180.0;

    nlohmann::json to_json() const;
    static ContextSpec from_json(const nlohmann::json& j);
};

/// Contexts the anchor belongs to. Night and Day partition the anchors.
std::vector<Context> contexts_of(const data::GriddedSeries& series, std::size_t anchor, const ContextSpec& spec = {});

struct EvalOptions {
    std::vector<int> horizons;  // steps; empty means 1..72
    /// 0: every anchor of the range (full coverage); otherwise a seeded
    /// sample of anchors whose longest horizon lies inside the range.
    int n_anchors = 200;
    std::uint64_t seed = 0;
    ContextSpec contexts;
    /// Score the whole path 1..h instead of the endpoint only.
    bool path_scoring = false;

    int max_horizon() const;
    nlohmann::json to_json() const;
    static EvalOptions from_json(const nlohmann::json& j);
};

struct MetricRow {
    std::string model;
    int horizon_min = 0;
    std::string context;
    std::size_t n = 0;
    std::optional<double> mae, rmse, mase, corr;
};

/// Anchors inside [begin, end). Sorted ascending.
std::vector<std::size_t> sample_anchors(std::size_t begin, std::size_t end, const EvalOptions& opts);

struct AnchorForecasts {
    std::string model;
    std::vector<std::size_t> anchors;
    std::vector<Eigen::VectorXd> paths;  // one per anchor, steps 1..H
    std::size_t failed = 0;              // anchors the forecaster could not serve
};

/// Runs the forecaster at each anchor; forecasting failures are counted and
/// the anchor is dropped for this model.
AnchorForecasts collect_forecasts(baselines::Forecaster& f, const data::GriddedSeries& series,
                                  const std::vector<std::size_t>& anchors, int horizon);

/// Scores forecasts against the series restricted to [begin, end); the naive
/// scale is computed on that segment.
std::vector<MetricRow> score(const AnchorForecasts& fc, const data::GriddedSeries& series, std::size_t begin,
                             std::size_t end, const EvalOptions& opts);

std::vector<MetricRow> evaluate(baselines::Forecaster& f, const data::GriddedSeries& series, std::size_t begin,
                                std::size_t end, const EvalOptions& opts);

/// Columns model, horizon_min, context, n, mae, rmse, mase, corr; undefined
/// metrics are left empty.
void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace dtdsim::eval
