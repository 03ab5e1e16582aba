#pragma once

// Fixtures shared by the unit suites and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dtdsim/physio_sim.hpp"
#include "dtdsim/rng.hpp"

namespace dtdsim::testing {

/// Default parameters with every entry scaled by a log-normal factor;
/// fractions kept inside (0, 1) and k_min <= k_max.
inline physio::StaticParams perturbed_params(const physio::StaticParams& base, Rng& rng, double log_sd = 0.3) {
    using physio::Param;
    physio::StaticParams s = base;
    for (double& v : s.values) v *= std::exp(log_sd * rng.normal());
    for (Param p : {Param::f, Param::b, Param::d}) s[p] = std::clamp(s[p], 0.05, 0.95);
    if (s[Param::k_min] > s[Param::k_max]) std::swap(s[Param::k_min], s[Param::k_max]);
    return s;
}

/// Random non-negative state around a reference state.
inline physio::PhysioState random_state(const physio::PhysioState& ref, Rng& rng) {
    physio::PhysioState x{};
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = ref[i] * rng.uniform(0.0, 2.0) + (rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.0, 50.0));
    return x;
}

inline physio::ExogenousInput random_input(Rng& rng, double basal_units) {
    physio::ExogenousInput u{basal_units, 0.0};
    if (rng.uniform() < 0.1) u.insulin_units += rng.uniform(0.0, 10.0);
    if (rng.uniform() < 0.1) u.carb_grams = rng.uniform(0.0, 100.0);
    return u;
}

/// CGM path of the static simulator with `substeps` Euler sub-steps per
/// 5-minute step.
inline std::vector<double> cgm_path(const physio::StaticParams& s, physio::PhysioState x,
                                    const std::vector<physio::ExogenousInput>& u, int substeps) {
    physio::Simulator sim(x, 5.0, substeps);
    std::vector<double> out;
    out.reserve(u.size());
    for (const auto& ui : u) out.push_back(physio::cgm_observe(sim.step(s.values, ui), s));
    return out;
}

}  // namespace dtdsim::testing
