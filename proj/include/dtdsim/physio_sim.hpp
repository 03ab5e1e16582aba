#pragma once

// UVA/Padova type-1-diabetes compartment model: state, parameters, the time
// derivative, explicit Euler stepping with non-negativity projection, and the
// CGM emission.
//
// Units follow the usual UVA/Padova conventions: stomach and gut masses in
// mg, plasma/tissue/subcutaneous glucose in mg/kg, plasma and liver insulin
// in pmol/kg, insulin signals in pmol/L, time in minutes.

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtdsim/autodiff.hpp"

namespace dtdsim::physio {

inline constexpr std::size_t kStateDim = 13;

/// Component order of the 13-dimensional state.
enum class Comp : std::size_t {
    QSto1 = 0,
    QSto2,
    QGut,
    Gp,
    Gt,
    Gs,
    Ip,
    Il,
    XL,
    X,
    ITilde,
    Isc1,
    Isc2,
};

std::string_view comp_name(Comp c) noexcept;

template <class T>
using StateVec = std::array<T, kStateDim>;

template <class T>
constexpr T& at(StateVec<T>& x, Comp c) noexcept { return x[static_cast<std::size_t>(c)]; }
template <class T>
constexpr const T& at(const StateVec<T>& x, Comp c) noexcept { return x[static_cast<std::size_t>(c)]; }

using PhysioState = StateVec<double>;

/// Subject parameters, in a fixed order. JSON keys are the names returned by
/// `param_name`.
enum class Param : std::size_t {
    k_min = 0,
    k_max,
    k_abs,
    k_gri,
    f,
    b,
    d,
    V_G,
    k_1,
    k_2,
    V_I,
    m_1,
    m_2,
    m_3,
    m_4,
    k_p1,
    k_p2,
    k_p3,
    k_i,
    F_snc,
    V_m0,
    V_mx,
    K_m0,
    p_2U,
    I_b,
    r_1,
    k_e1,
    k_e2,
    k_a1,
    k_a2,
    k_d,
    k_sc,
    BW,
};

inline constexpr std::size_t kNumParams = static_cast<std::size_t>(Param::BW) + 1;

std::string_view param_name(Param p) noexcept;
std::optional<Param> param_from_name(std::string_view name) noexcept;
nlohmann::json param_list_to_json(const std::vector<Param>& ps);
/// Throws ConfigError on unknown names.
std::vector<Param> param_list_from_json(const nlohmann::json& j);

template <class T>
using ParamVec = std::array<T, kNumParams>;

template <class T>
constexpr T& at(ParamVec<T>& p, Param k) noexcept { return p[static_cast<std::size_t>(k)]; }
template <class T>
constexpr const T& at(const ParamVec<T>& p, Param k) noexcept { return p[static_cast<std::size_t>(k)]; }

struct StaticParams {
    ParamVec<double> values{};

    double operator[](Param p) const noexcept { return at(values, p); }
    double& operator[](Param p) noexcept { return at(values, p); }

    /// Throws ConfigError when a rate/volume is non-positive, a fraction is
    /// outside (0,1) or k_min > k_max. Parameters that may legitimately be
    /// zero (EGP coefficients, F_snc, r_1, k_e1, I_b, m_3) only need to be
    /// non-negative.
    void validate() const;

    nlohmann::json to_json() const;
    /// Unknown keys are rejected. Missing keys are an error unless `fallback`
    /// is given, in which case they are filled from it.
    static StaticParams from_json(const nlohmann::json& j, const StaticParams* fallback = nullptr);
    static StaticParams load(const std::string& path, const StaticParams* fallback = nullptr);
};

/// Path of the shipped literature-average parameter file. Honors the
/// DTDSIM_DATA_DIR environment variable.
std::string default_params_path();
StaticParams load_default_params();

/// Which parameters vary in time, and their current values.
struct DynamicParams {
    std::vector<Param> which;
    std::vector<double> values;

    static std::vector<Param> default_set() { return {Param::V_mx, Param::k_abs, Param::k_p1}; }
    std::size_t size() const noexcept { return which.size(); }
};

struct ExogenousInput {
    double insulin_units = 0.0;  // U delivered during the step
    double carb_grams = 0.0;     // g ingested during the step
};

/// Optional amplification of insulin-dependent utilisation, risk(G) with G in
/// mg/dL. The default model uses risk = 0.
struct RiskHook {
    std::function<double(double)> value;
    std::function<double(double)> slope;
};

struct StepOptions {
    int substeps = 5;
    /// Mass (mg) of the most recent meal, driving the gastric emptying curve.
    double meal_mass_mg = 0.0;
    const RiskHook* risk = nullptr;
};

inline constexpr double kPmolPerUnit = 6000.0;
inline constexpr double kMgPerGram = 1000.0;

template <class T>
T gastric_emptying_rate(const T& q_sto, double meal_mass_mg, const ParamVec<T>& p) {
    using std::tanh;
    const T& kmax = at(p, Param::k_max);
    if (meal_mass_mg <= 0.0) return kmax;
    const T& kmin = at(p, Param::k_min);
    const T& b = at(p, Param::b);
    const T& d = at(p, Param::d);
    const T alpha = 5.0 / (2.0 * meal_mass_mg * (1.0 - b));
    const T beta = 5.0 / (2.0 * meal_mass_mg * d);
    return kmin + (kmax - kmin) * 0.5 *
                      (tanh(alpha * (q_sto - b * meal_mass_mg)) - tanh(beta * (q_sto - d * meal_mass_mg)) + 2.0);
}

/// Time derivative of the state. `insulin_rate` is in pmol/kg/min entering
/// the first subcutaneous depot, `carb_rate` in mg/min entering the stomach.
template <class T>
StateVec<T> uva_derivative(const StateVec<T>& x, double insulin_rate_u_per_min, double carb_rate_g_per_min,
                           const ParamVec<T>& p, double meal_mass_mg = 0.0, const RiskHook* risk = nullptr) {
    using ad::relu;
    using ad::unary;
    auto P = [&p](Param k) -> const T& { return at(p, k); };
    auto S = [&x](Comp c) -> const T& { return at(x, c); };

    const T q_sto = S(Comp::QSto1) + S(Comp::QSto2);
    const T k_empt = gastric_emptying_rate(q_sto, meal_mass_mg, p);
    const T ra = P(Param::f) * P(Param::k_abs) * S(Comp::QGut) / P(Param::BW);

    const T egp = relu(P(Param::k_p1) - P(Param::k_p2) * S(Comp::Gp) - P(Param::k_p3) * S(Comp::XL));
    T vm = P(Param::V_m0) + P(Param::V_mx) * S(Comp::X);
    if (risk != nullptr) {
        const T g = S(Comp::Gp) / P(Param::V_G);
        const double gv = ad::value_of(g);
        const T r = unary(g, risk->value(gv), risk->slope(gv));
        vm = P(Param::V_m0) + P(Param::V_mx) * S(Comp::X) * (1.0 + P(Param::r_1) * r);
    }
    const T u_id = vm * S(Comp::Gt) / (P(Param::K_m0) + S(Comp::Gt));
    const T excretion = P(Param::k_e1) * relu(S(Comp::Gp) - P(Param::k_e2));
    const T insulin = S(Comp::Ip) / P(Param::V_I);
    const T r_ai = P(Param::k_a1) * S(Comp::Isc1) + P(Param::k_a2) * S(Comp::Isc2);
    const T insulin_in = insulin_rate_u_per_min * kPmolPerUnit / P(Param::BW);

    StateVec<T> dx;
    at(dx, Comp::QSto1) = -P(Param::k_gri) * S(Comp::QSto1) + carb_rate_g_per_min * kMgPerGram;
    at(dx, Comp::QSto2) = -k_empt * S(Comp::QSto2) + P(Param::k_gri) * S(Comp::QSto1);
    at(dx, Comp::QGut) = -P(Param::k_abs) * S(Comp::QGut) + k_empt * S(Comp::QSto2);
    at(dx, Comp::Gp) = egp + ra - P(Param::F_snc) - excretion - P(Param::k_1) * S(Comp::Gp) +
                       P(Param::k_2) * S(Comp::Gt);
    at(dx, Comp::Gt) = -u_id + P(Param::k_1) * S(Comp::Gp) - P(Param::k_2) * S(Comp::Gt);
    at(dx, Comp::Gs) = P(Param::k_sc) * (S(Comp::Gp) - S(Comp::Gs));
    at(dx, Comp::Ip) = -(P(Param::m_2) + P(Param::m_4)) * S(Comp::Ip) + P(Param::m_1) * S(Comp::Il) + r_ai;
    at(dx, Comp::Il) = -(P(Param::m_1) + P(Param::m_3)) * S(Comp::Il) + P(Param::m_2) * S(Comp::Ip);
    at(dx, Comp::XL) = -P(Param::k_i) * (S(Comp::XL) - S(Comp::ITilde));
    at(dx, Comp::X) = P(Param::p_2U) * (relu(insulin - P(Param::I_b)) - S(Comp::X));
    at(dx, Comp::ITilde) = -P(Param::k_i) * (S(Comp::ITilde) - insulin);
    at(dx, Comp::Isc1) = -(P(Param::k_d) + P(Param::k_a1)) * S(Comp::Isc1) + insulin_in;
    at(dx, Comp::Isc2) = P(Param::k_d) * S(Comp::Isc1) - P(Param::k_a2) * S(Comp::Isc2);
    return dx;
}

/// Explicit Euler over `dt` minutes split into `opts.substeps` sub-steps,
/// each followed by projection onto x >= 0. Inputs are spread uniformly over
/// the step. No finiteness checks; see `uva_step` for the checked version.
template <class T>
StateVec<T> euler_step(const StateVec<T>& x0, const ParamVec<T>& p, const ExogenousInput& u, double dt,
                       const StepOptions& opts = {}) {
    using ad::clamp_nonneg;
    const double h = dt / opts.substeps;
    const double insulin_rate = u.insulin_units / dt;
    const double carb_rate = u.carb_grams / dt;
    StateVec<T> x = x0;
    for (int s = 0; s < opts.substeps; ++s) {
        const StateVec<T> dx = uva_derivative(x, insulin_rate, carb_rate, p, opts.meal_mass_mg, opts.risk);
        for (std::size_t i = 0; i < kStateDim; ++i) x[i] = clamp_nonneg(x[i] + h * dx[i]);
    }
    return x;
}

/// Overwrites the dynamic entries of `s` with `d`.
ParamVec<double> merge_params(const StaticParams& s, const DynamicParams& d);

/// Checked derivative for doubles: rejects non-finite states.
PhysioState uva_derivative_checked(const PhysioState& x, const ExogenousInput& u, const ParamVec<double>& p,
                                   double dt, const StepOptions& opts = {});

/// One grid step. Throws StateValidityError for a non-finite input state and
/// DivergenceError naming the first component whose derivative is not finite.
PhysioState uva_step(const PhysioState& x, const DynamicParams& d, const ExogenousInput& u, const StaticParams& s,
                     double dt = 5.0, const StepOptions& opts = {});
PhysioState uva_step(const PhysioState& x, const ParamVec<double>& p, const ExogenousInput& u, double dt = 5.0,
                     const StepOptions& opts = {});

template <class T>
T cgm_observe(const StateVec<T>& x, const T& v_g) {
    return at(x, Comp::Gs) / v_g;
}
double cgm_observe(const PhysioState& x, const StaticParams& s);

/// Closed-form basal equilibrium of the subcutaneous/plasma insulin chain
/// and the remote-insulin signals under constant infusion (U/min). Glucose
/// and gut compartments are left at zero.
PhysioState insulin_equilibrium(const StaticParams& s, double basal_u_per_min);

/// Basal infusion (U/min) whose equilibrium holds plasma glucose at
/// `target_mg_dl`. Throws InitializationError when no non-negative infusion
/// can (endogenous production too low for the target).
double basal_for_glucose(const StaticParams& s, double target_mg_dl);

/// Equilibrium of the model under constant basal infusion (U/min). The
/// glucose subsystem is solved by bracketing on plasma glucose; when several
/// equilibria exist the one closest to `target_mg_dl` is returned. When the
/// glucose subsystem has no positive equilibrium the depleted state (zero
/// glucose compartments, a fixed point of the projected dynamics) is
/// returned. Throws InitializationError if the result fails the residual
/// check.
PhysioState steady_state(const StaticParams& s, double basal_u_per_min, double target_mg_dl);

/// Insulin and gut at basal equilibrium, plasma and subcutaneous glucose set
/// to `glucose_mg_dl`, tissue glucose from the tissue balance. Not an
/// equilibrium in general; used to start rollouts at an observed glucose.
PhysioState quasi_steady_state(const StaticParams& s, double basal_u_per_min, double glucose_mg_dl);

/// Copy of `x` with plasma and subcutaneous glucose set to `glucose_mg_dl`
/// and tissue glucose rebalanced for the current insulin action.
PhysioState with_glucose(const PhysioState& x, const StaticParams& s, double glucose_mg_dl);

/// Max-norm of the derivative projected onto the feasible set (components at
/// zero with negative derivative count as stationary).
double projected_residual(const PhysioState& x, const ParamVec<double>& p, double basal_u_per_min);

/// Tracks the most recent meal mass across steps and advances the state.
class Simulator {
public:
    Simulator(PhysioState x0, double dt = 5.0, int substeps = 5) : x_(x0), dt_(dt), substeps_(substeps) {}

    const PhysioState& state() const noexcept { return x_; }
    double meal_mass_mg() const noexcept { return meal_mass_mg_; }
    void set_meal_mass_mg(double m) noexcept { meal_mass_mg_ = m; }

    const PhysioState& step(const ParamVec<double>& p, const ExogenousInput& u);

private:
    PhysioState x_;
    double dt_;
    int substeps_;
    double meal_mass_mg_ = 0.0;
};

/// Meal memory update rule shared by every rollout: a step with carbohydrate
/// input resets the emptying curve to that meal's mass.
inline double next_meal_mass(double current_mg, const ExogenousInput& u) {
    return u.carb_grams > 0.0 ? u.carb_grams * kMgPerGram : current_mg;
}

}  // namespace dtdsim::physio
