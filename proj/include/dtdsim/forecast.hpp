#pragma once

// Posterior-predictive forecasting from a fitted model: condition the
// latent noise on a trailing window, then roll the generative model forward
// under known or counterfactual future inputs.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtdsim/data_io.hpp"
#include "dtdsim/inference.hpp"

namespace dtdsim::forecast {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ConditioningOptions {
    int window = 72;    // steps of CGM the posterior is refitted on
    int burn_in = 72;   // steps of inputs replayed before the window
    int prior_steps = 2000;
    int iterations = 300;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static ConditioningOptions from_json(const nlohmann::json& j);
};

/// Variational posterior over the latent noise of the window ending at the
/// anchor, with the physiological state at the window start.
struct AnchorPosterior {
    std::size_t anchor = 0;       // index of the last observed step
    std::size_t window_start = 0;
    infer::ModelParams model;     // mu0 / Sigma0 replaced by the window prior
    infer::VariationalPosterior q;
    MatrixXd covariates;          // J x W
    std::vector<physio::ExogenousInput> inputs;
    physio::PhysioState x_start{};
    double meal_mass_start = 0.0;
    double final_loss = 0.0;
};

AnchorPosterior condition(const infer::Fitted& f, const data::GriddedSeries& series, std::size_t anchor,
                          const ConditioningOptions& opts = {});

struct ForecastRequest {
    int horizon = 72;
    int samples = 200;
    /// Inputs for steps anchor+1 .. anchor+h. Empty: taken from the series
    /// where it extends past the anchor, basal only beyond it.
    std::vector<physio::ExogenousInput> future_inputs;
    /// J x h. Empty: time of day computed exactly, energy repeated from the
    /// same clock time of the trailing day.
    MatrixXd future_covariates;
    bool observation_noise = false;
    /// Use the posterior means for the conditioned window instead of
    /// sampling them.
    bool reuse_means = false;
    bool keep_paths = false;
    std::uint64_t seed = 0;
};

struct ForecastResult {
    VectorXd mean, lo95, hi95;
    MatrixXd paths;  // samples x h, when retained
    int rejected = 0;
};

inline constexpr int kMaxRetries = 8;

/// Resolves empty future inputs/covariates of `req` against the series.
ForecastRequest complete_request(const infer::Fitted& f, const data::GriddedSeries& series, std::size_t anchor,
                                 ForecastRequest req);

/// One CGM path of length h drawn with the random stream of `sample_index`.
/// Divergent draws are redrawn up to kMaxRetries times; `rejected` counts
/// them.
VectorXd posterior_predictive_sample(const AnchorPosterior& ap, const ForecastRequest& req, std::uint64_t sample_index,
                                     int* rejected = nullptr);

ForecastResult point_forecast(const AnchorPosterior& ap, const ForecastRequest& req);

struct ScenarioEvent {
    double offset_minutes = 0.0;
    double carbs_g = 0.0;
    double bolus_u = 0.0;
};

struct Scenario {
    std::string name;
    std::vector<ScenarioEvent> events;
};

/// Basal delivery plus the scenario's events over h steps.
std::vector<physio::ExogenousInput> scenario_inputs(const Scenario& sc, double basal_u_per_min, int horizon);

/// The 2 x 2 grid: {no meal, 50 g meal} x {no bolus, 8 U bolus} at `offset`.
std::vector<Scenario> meal_bolus_grid(double offset_minutes = 30.0, double carbs_g = 50.0, double bolus_u = 8.0);

std::vector<Scenario> scenarios_from_json(const nlohmann::json& j);

/// Every scenario uses the same per-sample random streams.
std::map<std::string, ForecastResult> counterfactual_forecast(const AnchorPosterior& ap, double basal_u_per_min,
                                                              const ForecastRequest& base,
                                                              const std::vector<Scenario>& scenarios);

/// Columns timestamp, mean, lo95, hi95.
void write_forecast_csv(const std::string& path, const data::GriddedSeries& series, std::size_t anchor,
                        const ForecastResult& r);

/// Empirical quantile with linear interpolation between order statistics.
double quantile(std::vector<double> v, double p);

}  // namespace dtdsim::forecast
