#include "dtdsim/physio_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "dtdsim/errors.hpp"

#ifndef DTDSIM_DATA_DIR
#define DTDSIM_DATA_DIR "config"
#endif

namespace dtdsim::physio {

namespace {

constexpr std::array<std::string_view, kStateDim> kCompNames = {
    "q_sto1", "q_sto2", "q_gut", "g_p", "g_t", "g_s", "i_p", "i_l", "x_l", "x_act", "i_tilde", "i_sc1", "i_sc2",
};

constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "k_min", "k_max", "k_abs", "k_gri", "f",    "b",    "d",    "V_G",  "k_1",  "k_2",  "V_I",
    "m_1",   "m_2",   "m_3",   "m_4",   "k_p1", "k_p2", "k_p3", "k_i",  "F_snc", "V_m0", "V_mx",
    "K_m0",  "p_2U",  "I_b",   "r_1",   "k_e1", "k_e2", "k_a1", "k_a2", "k_d",  "k_sc", "BW",
};

constexpr std::string_view kSourceKey = "_source";

// May be zero: switching off a pathway is a legitimate configuration.
bool may_be_zero(Param p) {
    switch (p) {
        case Param::k_p1:
        case Param::k_p2:
        case Param::k_p3:
        case Param::F_snc:
        case Param::r_1:
        case Param::k_e1:
        case Param::I_b:
        case Param::m_3:
        case Param::V_mx:
            return true;
        default:
            return false;
    }
}

}  // namespace

std::string_view comp_name(Comp c) noexcept { return kCompNames[static_cast<std::size_t>(c)]; }

std::string_view param_name(Param p) noexcept { return kParamNames[static_cast<std::size_t>(p)]; }

std::optional<Param> param_from_name(std::string_view name) noexcept {
    for (std::size_t i = 0; i < kNumParams; ++i) {
        if (kParamNames[i] == name) return static_cast<Param>(i);
    }
    return std::nullopt;
}

nlohmann::json param_list_to_json(const std::vector<Param>& ps) {
    nlohmann::json a = nlohmann::json::array();
    for (Param p : ps) a.push_back(std::string(param_name(p)));
    return a;
}

std::vector<Param> param_list_from_json(const nlohmann::json& j) {
    std::vector<Param> out;
    for (const auto& n : j) {
        const auto p = param_from_name(n.get<std::string>());
        if (!p) throw ConfigError("unknown simulator parameter '" + n.get<std::string>() + "'");
        out.push_back(*p);
    }
    return out;
}

void StaticParams::validate() const {
    for (std::size_t i = 0; i < kNumParams; ++i) {
        const auto p = static_cast<Param>(i);
        const double v = values[i];
        if (!std::isfinite(v)) throw ConfigError("parameter " + std::string(param_name(p)) + " is not finite");
        if (v < 0.0 || (v == 0.0 && !may_be_zero(p))) {
            throw ConfigError("parameter " + std::string(param_name(p)) + " must be positive");
        }
    }
    for (Param p : {Param::f, Param::b, Param::d}) {
        if ((*this)[p] >= 1.0) throw ConfigError("fraction " + std::string(param_name(p)) + " must lie in (0,1)");
    }
    if ((*this)[Param::k_min] > (*this)[Param::k_max]) throw ConfigError("k_min exceeds k_max");
}

nlohmann::json StaticParams::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < kNumParams; ++i) j[std::string(kParamNames[i])] = values[i];
    return j;
}

StaticParams StaticParams::from_json(const nlohmann::json& j, const StaticParams* fallback) {
    if (!j.is_object()) throw ConfigError("parameter set must be a JSON object");
    StaticParams out;
    std::array<bool, kNumParams> seen{};
    for (const auto& [key, val] : j.items()) {
        if (key == kSourceKey) continue;
        const auto p = param_from_name(key);
        if (!p) throw ConfigError("unknown parameter key '" + key + "'");
        if (!val.is_number()) throw ConfigError("parameter '" + key + "' is not a number");
        out[*p] = val.get<double>();
        seen[static_cast<std::size_t>(*p)] = true;
    }
    for (std::size_t i = 0; i < kNumParams; ++i) {
        if (seen[i]) continue;
        if (fallback == nullptr) {
            throw ConfigError("missing parameter '" + std::string(kParamNames[i]) + "'");
        }
        out.values[i] = fallback->values[i];
    }
    out.validate();
    return out;
}

StaticParams StaticParams::load(const std::string& path, const StaticParams* fallback) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open parameter file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed parameter file " + path + ": " + e.what());
    }
    return from_json(j, fallback);
}

std::string default_params_path() {
    if (const char* dir = std::getenv("DTDSIM_DATA_DIR"); dir != nullptr && *dir != '\0') {
        return std::string(dir) + "/literature_adult_average.json";
    }
    return std::string(DTDSIM_DATA_DIR) + "/literature_adult_average.json";
}

StaticParams load_default_params() { return StaticParams::load(default_params_path()); }

ParamVec<double> merge_params(const StaticParams& s, const DynamicParams& d) {
    if (d.which.size() != d.values.size()) throw DimensionError("dynamic parameter names and values differ in length");
    ParamVec<double> p = s.values;
    for (std::size_t k = 0; k < d.which.size(); ++k) at(p, d.which[k]) = d.values[k];
    return p;
}

PhysioState uva_derivative_checked(const PhysioState& x, const ExogenousInput& u, const ParamVec<double>& p,
                                   double dt, const StepOptions& opts) {
    for (std::size_t i = 0; i < kStateDim; ++i) {
        if (!std::isfinite(x[i])) {
            throw StateValidityError("state component " + std::string(kCompNames[i]) + " is not finite");
        }
    }
    return uva_derivative(x, u.insulin_units / dt, u.carb_grams / dt, p, opts.meal_mass_mg, opts.risk);
}

PhysioState uva_step(const PhysioState& x, const ParamVec<double>& p, const ExogenousInput& u, double dt,
                     const StepOptions& opts) {
    if (!(dt > 0.0) || opts.substeps < 1) throw ConfigError("uva_step needs dt > 0 and at least one sub-step");
    for (std::size_t i = 0; i < kStateDim; ++i) {
        if (!std::isfinite(x[i])) {
            throw StateValidityError("state component " + std::string(kCompNames[i]) + " is not finite");
        }
    }
    const double h = dt / opts.substeps;
    const double insulin_rate = u.insulin_units / dt;
    const double carb_rate = u.carb_grams / dt;
    PhysioState cur = x;
    for (int s = 0; s < opts.substeps; ++s) {
        const PhysioState dx = uva_derivative(cur, insulin_rate, carb_rate, p, opts.meal_mass_mg, opts.risk);
        for (std::size_t i = 0; i < kStateDim; ++i) {
            if (!std::isfinite(dx[i])) {
                throw DivergenceError("derivative of " + std::string(kCompNames[i]) + " is not finite");
            }
            cur[i] = ad::clamp_nonneg(cur[i] + h * dx[i]);
        }
    }
    return cur;
}

PhysioState uva_step(const PhysioState& x, const DynamicParams& d, const ExogenousInput& u, const StaticParams& s,
                     double dt, const StepOptions& opts) {
    return uva_step(x, merge_params(s, d), u, dt, opts);
}

double cgm_observe(const PhysioState& x, const StaticParams& s) { return at(x, Comp::Gs) / s[Param::V_G]; }

namespace {

double plasma_clearance(const StaticParams& s) {
    const double m1 = s[Param::m_1], m2 = s[Param::m_2], m3 = s[Param::m_3], m4 = s[Param::m_4];
    return m2 + m4 - m1 * m2 / (m1 + m3);
}

double tissue_uptake(const StaticParams& s, double gt, double x_act) {
    return (s[Param::V_m0] + s[Param::V_mx] * x_act) * gt / (s[Param::K_m0] + gt);
}

double egp(const StaticParams& s, double gp, double x_l) {
    return std::max(s[Param::k_p1] - s[Param::k_p2] * gp - s[Param::k_p3] * x_l, 0.0);
}

double excretion(const StaticParams& s, double gp) { return s[Param::k_e1] * std::max(gp - s[Param::k_e2], 0.0); }

// Tissue glucose balancing uptake against exchange for a given plasma mass.
double tissue_balance(const StaticParams& s, double gp, double x_act) {
    const double k1 = s[Param::k_1], k2 = s[Param::k_2];
    double lo = 0.0, hi = k1 * gp / k2;
    for (int it = 0; it < 200 && hi - lo > 1e-13 * (1.0 + hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        const double g = tissue_uptake(s, mid, x_act) + k2 * mid - k1 * gp;
        (g > 0.0 ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
}

template <class F>
double bisect(F&& f, double lo, double hi) {
    double flo = f(lo);
    for (int it = 0; it < 300 && hi - lo > 1e-14 * (1.0 + std::fabs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if ((fm > 0.0) == (flo > 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

}  // namespace

PhysioState insulin_equilibrium(const StaticParams& s, double basal_u_per_min) {
    if (!(basal_u_per_min >= 0.0)) throw InitializationError("basal rate must be non-negative");
    const double u = basal_u_per_min * kPmolPerUnit / s[Param::BW];
    PhysioState x{};
    const double isc1 = u / (s[Param::k_d] + s[Param::k_a1]);
    at(x, Comp::Isc1) = isc1;
    at(x, Comp::Isc2) = s[Param::k_d] * isc1 / s[Param::k_a2];
    const double ip = u / plasma_clearance(s);
    at(x, Comp::Ip) = ip;
    at(x, Comp::Il) = s[Param::m_2] * ip / (s[Param::m_1] + s[Param::m_3]);
    const double insulin = ip / s[Param::V_I];
    at(x, Comp::ITilde) = insulin;
    at(x, Comp::XL) = insulin;
    at(x, Comp::X) = std::max(insulin - s[Param::I_b], 0.0);
    return x;
}

double basal_for_glucose(const StaticParams& s, double target_mg_dl) {
    if (!(target_mg_dl > 0.0)) throw InitializationError("target glucose must be positive");
    const double gp = target_mg_dl * s[Param::V_G];
    const double k1 = s[Param::k_1], k2 = s[Param::k_2];
    // Plasma balance fixes tissue glucose for a given insulin level; the
    // tissue balance residual is then increasing in insulin.
    auto residual = [&](double insulin) {
        const double gt = (s[Param::F_snc] + excretion(s, gp) + k1 * gp - egp(s, gp, insulin)) / k2;
        if (gt < 0.0) return -1.0;
        const double x_act = std::max(insulin - s[Param::I_b], 0.0);
        return tissue_uptake(s, gt, x_act) - (k1 * gp - k2 * gt);
    };
    if (residual(0.0) > 0.0) {
        throw InitializationError("no basal infusion holds glucose at " + std::to_string(target_mg_dl) +
                                  " mg/dL: uptake exceeds production even without insulin; review k_p1, V_m0, F_snc");
    }
    double hi = 1.0;
    while (residual(hi) <= 0.0) {
        hi *= 2.0;
        if (hi > 1e9) {
            throw InitializationError("no basal infusion reaches the glucose target; review V_mx and k_p3");
        }
    }
    const double insulin = bisect(residual, 0.0, hi);
    const double ip = insulin * s[Param::V_I];
    return ip * plasma_clearance(s) * s[Param::BW] / kPmolPerUnit;
}

double projected_residual(const PhysioState& x, const ParamVec<double>& p, double basal_u_per_min) {
    const PhysioState dx = uva_derivative(x, basal_u_per_min, 0.0, p);
    double worst = 0.0;
    for (std::size_t i = 0; i < kStateDim; ++i) {
        if (x[i] <= 0.0 && dx[i] < 0.0) continue;
        worst = std::max(worst, std::fabs(dx[i]));
    }
    return worst;
}

PhysioState steady_state(const StaticParams& s, double basal_u_per_min, double target_mg_dl) {
    if (!(target_mg_dl > 0.0)) throw InitializationError("target glucose must be positive");
    PhysioState x = insulin_equilibrium(s, basal_u_per_min);
    const double x_act = at(x, Comp::X);
    const double x_l = at(x, Comp::XL);
    const double k1 = s[Param::k_1], k2 = s[Param::k_2], vg = s[Param::V_G];

    auto plasma_residual = [&](double gp) {
        const double gt = tissue_balance(s, gp, x_act);
        return egp(s, gp, x_l) - s[Param::F_snc] - excretion(s, gp) - k1 * gp + k2 * gt;
    };

    // Scan plasma glucose up to 2000 mg/dL for sign changes.
    constexpr int kGrid = 4000;
    const double gmax = 2000.0 * vg;
    double best = -1.0;
    double prev_g = 1e-9 * vg;
    double prev_r = plasma_residual(prev_g);
    for (int i = 1; i <= kGrid; ++i) {
        const double g = gmax * i / kGrid;
        const double r = plasma_residual(g);
        if ((r > 0.0) != (prev_r > 0.0) || r == 0.0) {
            const double root = r == 0.0 ? g : bisect(plasma_residual, prev_g, g);
            if (best < 0.0 || std::fabs(root / vg - target_mg_dl) < std::fabs(best / vg - target_mg_dl)) best = root;
        }
        prev_g = g;
        prev_r = r;
    }
    if (best > 0.0) {
        at(x, Comp::Gp) = best;
        at(x, Comp::Gt) = tissue_balance(s, best, x_act);
        at(x, Comp::Gs) = best;
    }
    const double res = projected_residual(x, s.values, basal_u_per_min);
    if (!(res < 1e-6)) {
        throw InitializationError("no steady state found (residual " + std::to_string(res) +
                                  "); review the subject parameters");
    }
    return x;
}

PhysioState quasi_steady_state(const StaticParams& s, double basal_u_per_min, double glucose_mg_dl) {
    PhysioState x = insulin_equilibrium(s, basal_u_per_min);
    const double gp = std::max(glucose_mg_dl, 0.0) * s[Param::V_G];
    at(x, Comp::Gp) = gp;
    at(x, Comp::Gs) = gp;
    at(x, Comp::Gt) = tissue_balance(s, gp, at(x, Comp::X));
    return x;
}

PhysioState with_glucose(const PhysioState& x, const StaticParams& s, double glucose_mg_dl) {
    PhysioState out = x;
    const double gp = std::max(glucose_mg_dl, 0.0) * s[Param::V_G];
    at(out, Comp::Gp) = gp;
    at(out, Comp::Gs) = gp;
    at(out, Comp::Gt) = tissue_balance(s, gp, at(x, Comp::X));
    return out;
}

const PhysioState& Simulator::step(const ParamVec<double>& p, const ExogenousInput& u) {
    meal_mass_mg_ = next_meal_mass(meal_mass_mg_, u);
    StepOptions opts;
    opts.substeps = substeps_;
    opts.meal_mass_mg = meal_mass_mg_;
    x_ = uva_step(x_, p, u, dt_, opts);
    return x_;
}

}  // namespace dtdsim::physio
