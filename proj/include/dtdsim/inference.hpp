#pragma once

// Variational fitting: non-centred mean-field posterior over the latent
// noise, reparameterised ELBO with an analytic KL term, exact gradients,
// Adam updates and spectral projection of A after every step.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtdsim/data_io.hpp"
#include "dtdsim/latent_dynamics.hpp"
#include "dtdsim/param_link.hpp"
#include "dtdsim/physio_sim.hpp"
#include "dtdsim/rng.hpp"

namespace dtdsim::infer {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kMinPosteriorSd = 1e-8;
inline constexpr double kDivergedLoss = 1e12;

// ---- variational posterior ---------------------------------------------------

/// q(eps_0) q(eps_1..T), all factors diagonal Gaussians. Widths are stored
/// as logs.
struct VariationalPosterior {
    VectorXd m0, log_s0;  // factor of the initial-state noise
    MatrixXd m, log_s;    // D x T

    Index dim() const noexcept { return m.rows(); }
    Index length() const noexcept { return m.cols(); }
    MatrixXd s() const;
    VectorXd s0() const;

    static VariationalPosterior standard(Index D, Index T, double sd = 1.0);
    void check() const;

    nlohmann::json to_json() const;
    static VariationalPosterior from_json(const nlohmann::json& j);
};

/// Standard-normal draws behind one reparameterised sample.
struct NoiseDraw {
    VectorXd eta0;
    MatrixXd eta;  // D x T
};

NoiseDraw draw_noise(Index D, Index T, Rng& rng);

struct EpsSample {
    VectorXd eps0;
    MatrixXd eps;
};

/// eps = m + s * eta with s floored at kMinPosteriorSd.
EpsSample apply_noise(const VariationalPosterior& q, const NoiseDraw& n);
EpsSample sample_q(const VariationalPosterior& q, Rng& rng);

/// KL(q || N(0, I)) summed over every factor.
double kl_term(const VariationalPosterior& q);

// ---- emissions ---------------------------------------------------------------

/// Maps a latent path to predicted CGM means and back-propagates adjoints.
class Emission {
public:
    virtual ~Emission() = default;
    virtual Index num_params() const = 0;
    virtual void get_params(std::span<double> out) const = 0;
    virtual void set_params(std::span<const double> in) = 0;
    /// Predicted means for the columns of `Z` (D x T). Returns false when the
    /// rollout diverges.
    virtual bool forward(const MatrixXd& Z, VectorXd& mean) = 0;
    /// Adjoint of the most recent `forward` call: fills g_Z (D x T) and
    /// accumulates into g_params.
    virtual void backward(const VectorXd& g_mean, MatrixXd& g_Z, std::span<double> g_params) = 0;
    virtual std::unique_ptr<Emission> clone() const = 0;
};

/// mean_t = h . z_t + c. With D = 1, h = 1, c = 0 this is the identity link
/// with a linear observation.
class LinearEmission final : public Emission {
public:
    LinearEmission(VectorXd h, double c) : h_(std::move(h)), c_(c) {}
    Index num_params() const override { return h_.size() + 1; }
    void get_params(std::span<double> out) const override;
    void set_params(std::span<const double> in) override;
    bool forward(const MatrixXd& Z, VectorXd& mean) override;
    void backward(const VectorXd& g_mean, MatrixXd& g_Z, std::span<double> g_params) override;
    std::unique_ptr<Emission> clone() const override { return std::make_unique<LinearEmission>(*this); }

private:
    VectorXd h_;
    double c_;
    MatrixXd Z_;
};

/// Link network followed by the Euler-integrated simulator and the CGM
/// observation. Parameters: link weights, then logs of the fitted static
/// entries. A fitted static entry that is also dynamic acts through the link
/// anchor.
class SimulatorEmission final : public Emission {
public:
    SimulatorEmission(link::LinkNetwork net, physio::StaticParams s, std::vector<physio::Param> k_set,
                      std::vector<physio::Param> fitted_static, physio::PhysioState x0,
                      std::vector<physio::ExogenousInput> inputs, double initial_meal_mass_mg = 0.0,
                      int substeps = 5);

    Index num_params() const override;
    void get_params(std::span<double> out) const override;
    void set_params(std::span<const double> in) override;
    bool forward(const MatrixXd& Z, VectorXd& mean) override;
    void backward(const VectorXd& g_mean, MatrixXd& g_Z, std::span<double> g_params) override;
    std::unique_ptr<Emission> clone() const override { return std::make_unique<SimulatorEmission>(*this); }

    const link::LinkNetwork& net() const noexcept { return net_; }
    const physio::StaticParams& static_params() const noexcept { return s_; }
    const std::vector<physio::Param>& k_set() const noexcept { return k_set_; }
    const std::vector<physio::Param>& fitted_static() const noexcept { return fitted_; }
    const physio::PhysioState& x0() const noexcept { return x0_; }
    /// Dynamic parameters and states of the last forward call.
    const MatrixXd& last_dynamic() const noexcept { return d_; }
    const std::vector<physio::PhysioState>& last_states() const noexcept { return states_; }

private:
    link::LinkNetwork net_;
    physio::StaticParams s_;
    std::vector<physio::Param> k_set_;
    std::vector<physio::Param> fitted_;
    physio::PhysioState x0_;
    std::vector<physio::ExogenousInput> u_;
    std::vector<double> meal_mass_;
    int substeps_;

    link::LinkCache cache_;
    MatrixXd d_;
    std::vector<physio::PhysioState> states_;
};

// ---- objective -----------------------------------------------------------------

struct ElboParts {
    double loglik = 0.0;
    double kl = 0.0;
    double penalty = 0.0;
    double elbo = 0.0;
    bool diverged = false;
};

/// Named contiguous ranges of the flat parameter vector.
struct ParamBlock {
    std::string name;
    Index offset = 0;
    Index size = 0;
};

/// Negative ELBO over a flat vector holding
/// [A | B | Q_sqrt | mu0 | Sigma0_sqrt | emission | log sigma | posterior].
/// Triangular factors store their lower triangle column by column with the
/// diagonal as logs.
class ElboObjective {
public:
    ElboObjective(VectorXd y, MatrixXd covariates, std::unique_ptr<Emission> emission, Index latent_dim,
                  double penalty_weight = 1.0, latent::PenaltyMode mode = latent::PenaltyMode::Absolute);
    ElboObjective(const ElboObjective& other);

    Index size() const noexcept { return total_; }
    Index length() const noexcept { return y_.size(); }
    Index latent_dim() const noexcept { return D_; }
    const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
    const ParamBlock& block(const std::string& name) const;

    std::vector<double> pack(const latent::DynamicsParams& dyn, double sigma, const VariationalPosterior& q) const;
    void unpack(std::span<const double> x, latent::DynamicsParams& dyn, double& sigma, VariationalPosterior& q);

    /// Loss (negative ELBO averaged over `draws`). Writes d loss / d x into
    /// `grad` when it is non-empty. Divergence yields kDivergedLoss, a zero
    /// gradient and parts->diverged.
    double evaluate(std::span<const double> x, const std::vector<NoiseDraw>& draws, std::span<double> grad,
                    ElboParts* parts = nullptr);

    Emission& emission() noexcept { return *emission_; }
    const VectorXd& observations() const noexcept { return y_; }
    const MatrixXd& covariates() const noexcept { return a_; }

private:
    VectorXd y_;
    MatrixXd a_;
    std::unique_ptr<Emission> emission_;
    Index D_;
    double penalty_weight_;
    latent::PenaltyMode mode_;
    std::vector<ParamBlock> blocks_;
    Index total_ = 0;
};

// ---- optimiser ---------------------------------------------------------------------

struct AdamState {
    VectorXd m, v;
    long t = 0;
    long skipped = 0;
};

/// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8) of the unmasked
/// coordinates. A non-finite gradient skips the step and returns false.
bool adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               std::span<const std::uint8_t> trainable = {});

struct FitConfig {
    double learning_rate = 1e-4;
    int mc_samples = 1;
    double penalty_weight = 1.0;
    latent::PenaltyMode penalty_mode = latent::PenaltyMode::Absolute;
    int patience = 500;
    int max_iterations = 20000;
    std::uint64_t seed = 0;
    int latent_dim = 3;
    std::vector<physio::Param> k_set = physio::DynamicParams::default_set();
    std::vector<physio::Param> fitted_static;
    /// Parameter blocks held fixed (names as in ElboObjective::blocks).
    std::vector<std::string> frozen;
    bool fit_sigma = true;
    double init_sigma = 10.0;
    double init_posterior_sd = 0.1;
    double init_a_diag = 0.95;
    double init_q = 0.1;
    int substeps = 5;

    void validate() const;
    nlohmann::json to_json() const;
    static FitConfig from_json(const nlohmann::json& j);
};

struct FitTrace {
    std::vector<double> loss;
    std::vector<double> best;
    std::vector<double> rho;  // spectral radius of A after each projection
    long skipped = 0;
    long diverged = 0;
    int iterations = 0;
    int best_iteration = -1;
    std::string stop_reason;

    nlohmann::json to_json() const;
    static FitTrace from_json(const nlohmann::json& j);
};

struct OptimizeResult {
    std::vector<double> best;
    FitTrace trace;
};

/// Generic loop: fresh noise per iteration, Adam, projection of A, patience
/// on the best loss. Throws FitError when more than 10% of the steps were
/// skipped.
OptimizeResult optimize(ElboObjective& obj, std::vector<double> x0, const FitConfig& cfg,
                        const std::function<void(int, double)>& on_iteration = {});

// ---- DTD-Sim model ---------------------------------------------------------------------

struct ModelParams {
    latent::DynamicsParams dyn;
    link::LinkNetwork net;
    physio::StaticParams s;
    std::vector<physio::Param> k_set;
    std::vector<physio::Param> fitted_static;
    double sigma = 10.0;

    nlohmann::json to_json() const;
    static ModelParams from_json(const nlohmann::json& j);
};

/// Everything a rollout needs from a training series.
struct SeriesContext {
    VectorXd y;                                 // NaN where missing
    MatrixXd covariates;                        // J x T
    std::vector<physio::ExogenousInput> inputs;
    physio::PhysioState x0;
    double initial_meal_mass_mg = 0.0;
};

struct Fitted {
    ModelParams model;
    VariationalPosterior posterior;
    FitConfig config;
    FitTrace trace;
    latent::CovariateScaling scaling;
    double basal_u_per_min = 0.0;
    physio::PhysioState x0{};
    nlohmann::json fingerprint;
};

latent::CovariateScaling covariate_scaling(const data::GriddedSeries& series);
MatrixXd covariates_for(const data::GriddedSeries& series, const latent::CovariateScaling& scaling);

/// x0 from the basal steady state at the first observed glucose.
physio::PhysioState initial_state(const physio::StaticParams& s, double basal_u_per_min,
                                  const data::GriddedSeries& series);

/// Physiological state entering step `window_start`: `burn_in` steps of the
/// recorded inputs replayed through the static model from a quasi-steady
/// state, with glucose then pinned to the latest observation before the
/// window (the first one inside it when none precedes it).
struct WindowStart {
    physio::PhysioState x{};
    double meal_mass_mg = 0.0;
};
WindowStart replay_to(const physio::StaticParams& s, double basal_u_per_min, const data::GriddedSeries& series,
                      std::size_t window_start, int burn_in);

ModelParams init_model(const physio::StaticParams& s, const FitConfig& cfg, Index covariate_dim);

/// Builds the objective for a model on a context.
ElboObjective make_objective(const ModelParams& m, const SeriesContext& ctx, const FitConfig& cfg);

/// Writes the flat vector back into the model and posterior.
void unpack_model(ElboObjective& obj, std::span<const double> x, ModelParams& m, VariationalPosterior& q);

Fitted fit(const data::GriddedSeries& train, const FitConfig& cfg, const physio::StaticParams& s_init,
           const std::function<void(int, double)>& on_iteration = {});

/// Posterior-mean latent path (eps = m) and its linked dynamic parameters.
struct PosteriorMeanPath {
    MatrixXd z;  // D x T
    MatrixXd d;  // K x T
    VectorXd cgm;
};
PosteriorMeanPath posterior_mean_path(const Fitted& f, const data::GriddedSeries& train);

nlohmann::json checkpoint_to_json(const Fitted& f);
Fitted checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::string& path, const Fitted& f);
/// Throws FingerprintError when `expected` is given and does not match.
Fitted load_checkpoint(const std::string& path, const data::GriddedSeries* expected = nullptr);

}  // namespace dtdsim::infer
