#pragma once

// Comparison forecasters and the interface every forecaster implements for
// the evaluation harness.

#include <complex>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtdsim/data_io.hpp"
#include "dtdsim/forecast.hpp"
#include "dtdsim/inference.hpp"
#include "dtdsim/physio_sim.hpp"

namespace dtdsim::baselines {

using Eigen::VectorXd;

/// Point forecast for steps anchor+1 .. anchor+h given everything observed
/// up to and including the anchor. Empty `future_inputs` means the recorded
/// inputs of the series (basal only past its end).
class Forecaster {
public:
    virtual ~Forecaster() = default;
    virtual std::string name() const = 0;
    virtual VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                              const std::vector<physio::ExogenousInput>& future_inputs = {}) = 0;
};

// ---- ARMA ----------------------------------------------------------------------

/// x_t = intercept + sum phi_i (x_{t-i} - intercept) + e_t + sum theta_j e_{t-j}
struct ArmaModel {
    std::vector<double> phi, theta;
    double intercept = 0.0;
    double variance = 0.0;

    int p() const noexcept { return static_cast<int>(phi.size()); }
    int q() const noexcept { return static_cast<int>(theta.size()); }
    nlohmann::json to_json() const;
    static ArmaModel from_json(const nlohmann::json& j);
};

struct ArmaFitOptions {
    int iterations = 400;
    double learning_rate = 1e-2;
    /// Stop once the gradient norm of the mean squared standardised residual
    /// falls below this; fail if it is above `fail_grad_norm` at the end.
    double grad_tol = 1e-6;
    double fail_grad_norm = 1e-2;
};

/// Inverse roots of 1 - c_1 z - ... - c_n z^n (eigenvalues of the companion
/// matrix).
std::vector<std::complex<double>> inverse_roots(const std::vector<double>& c);

/// Reflects inverse roots on or outside the unit circle to the inside and
/// returns the rebuilt coefficients.
std::vector<double> reflect_roots(const std::vector<double>& c);

/// Conditional residuals of the centred series; missing values are replaced
/// by their one-step prediction and get a zero residual.
std::vector<double> arma_residuals(const ArmaModel& m, const std::vector<double>& y);

/// Conditional-sum-of-squares fit on the mean-centred series. Throws
/// DimensionError when the series is too short, ConvergenceError with the
/// final gradient norm when the optimiser does not settle.
ArmaModel arma_fit(const std::vector<double>& y, int p, int q, const ArmaFitOptions& opts = {});

/// Expected path with future innovations set to zero.
std::vector<double> arma_forecast(const ArmaModel& m, const std::vector<double>& history, int horizon);

/// One-step predictions: element t is predicted from y[0..t).
std::vector<double> arma_one_step(const ArmaModel& m, const std::vector<double>& y);

/// Conditional Gaussian log-likelihood of the series under the model.
double arma_loglik(const ArmaModel& m, const std::vector<double>& y);

struct ArmaSelection {
    ArmaModel model;
    /// "p,q" -> validation one-step MAE; absent when the fit failed.
    std::map<std::string, double> validation_mae;
};

/// Fits every order in {0..max_p} x {0..max_q} on `train` and keeps the one
/// with the lowest one-step MAE over `valid` (forecast from train + valid
/// history).
ArmaSelection arma_grid(const std::vector<double>& train, const std::vector<double>& valid, int max_p = 3,
                        int max_q = 3, const ArmaFitOptions& opts = {});

// ---- naive -------------------------------------------------------------------

/// Last observed value repeated. Throws DataError when nothing is observed.
std::vector<double> naive_forecast(const std::vector<double>& history, int horizon);

// ---- static simulator on a moving window ------------------------------------------

struct StaticWindowOptions {
    int window = 72;   // 6 h
    int burn_in = 72;
    int iterations = 150;
    double learning_rate = 0.03;
    /// Empty: the dynamic set (V_mx, k_abs, k_p1).
    std::vector<physio::Param> subset;
    bool fit_sigma = true;

    nlohmann::json to_json() const;
    static StaticWindowOptions from_json(const nlohmann::json& j);
};

struct StaticWindowFit {
    physio::StaticParams s;
    double sigma = 0.0;
    double residual = 0.0;  // RMSE over the observed window
    bool ok = true;
    int iterations = 0;
};

/// Least-squares (Gaussian likelihood) fit of `subset` in log space to the
/// observed CGM of `window`, simulated from `x0` with the window's inputs.
/// Divergence returns s_init with ok = false.
StaticWindowFit static_window_fit(const data::GriddedSeries& window, const physio::PhysioState& x0,
                                  double meal_mass_mg, const physio::StaticParams& s_init,
                                  const StaticWindowOptions& opts = {});

// ---- forecaster adapters ---------------------------------------------------------

/// Resolves empty future inputs against the series: recorded where
/// available, basal beyond.
std::vector<physio::ExogenousInput> resolve_inputs(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                                                   double basal_u_per_min,
                                                   const std::vector<physio::ExogenousInput>& future_inputs);

class NaiveForecaster final : public Forecaster {
public:
    std::string name() const override { return "naive"; }
    VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                      const std::vector<physio::ExogenousInput>& future_inputs = {}) override;
};

/// Gaps of the history are linearly filled before the recursion; only the
/// trailing `history_steps` are used.
class ArmaForecaster final : public Forecaster {
public:
    explicit ArmaForecaster(ArmaModel m, int history_steps = 2016) : m_(std::move(m)), history_(history_steps) {}
    std::string name() const override;
    VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                      const std::vector<physio::ExogenousInput>& future_inputs = {}) override;
    const ArmaModel& model() const noexcept { return m_; }

private:
    ArmaModel m_;
    int history_;
};

class StaticWindowForecaster final : public Forecaster {
public:
    StaticWindowForecaster(physio::StaticParams s_init, double basal_u_per_min, StaticWindowOptions opts = {})
        : s_(std::move(s_init)), basal_(basal_u_per_min), opts_(std::move(opts)) {}
    std::string name() const override { return "static_window"; }
    VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                      const std::vector<physio::ExogenousInput>& future_inputs = {}) override;
    /// Fit of the most recent forecast call.
    const StaticWindowFit& last_fit() const noexcept { return last_; }

private:
    physio::StaticParams s_;
    double basal_;
    StaticWindowOptions opts_;
    StaticWindowFit last_;
};

/// Posterior-predictive mean of the fitted hybrid model.
class DtdForecaster final : public Forecaster {
public:
    DtdForecaster(infer::Fitted f, forecast::ConditioningOptions cond = {}, int samples = 200, std::uint64_t seed = 0)
        : f_(std::move(f)), cond_(cond), samples_(samples), seed_(seed) {}
    std::string name() const override { return "dtd_sim"; }
    VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                      const std::vector<physio::ExogenousInput>& future_inputs = {}) override;
    const infer::Fitted& fitted() const noexcept { return f_; }
    const forecast::ForecastResult& last_result() const noexcept { return last_; }

private:
    infer::Fitted f_;
    forecast::ConditioningOptions cond_;
    int samples_;
    std::uint64_t seed_;
    forecast::ForecastResult last_;
};

/// Forecasts produced elsewhere, read from CSV with columns
/// anchor_timestamp, step, value (step 1 = anchor + 5 min).
class ExternalForecaster final : public Forecaster {
public:
    ExternalForecaster(std::string name, const std::string& csv_path);
    std::string name() const override { return name_; }
    /// Throws ForecastError for anchors or steps missing from the file.
    VectorXd forecast(const data::GriddedSeries& series, std::size_t anchor, int horizon,
                      const std::vector<physio::ExogenousInput>& future_inputs = {}) override;

private:
    std::string name_;
    std::map<std::int64_t, std::map<int, double>> table_;  // anchor epoch -> step -> value
};

void write_external_csv(const std::string& path, const data::GriddedSeries& series,
                        const std::vector<std::size_t>& anchors, const std::vector<VectorXd>& forecasts);

}  // namespace dtdsim::baselines
