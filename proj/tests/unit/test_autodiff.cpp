#include <doctest.h>

#include <cmath>
#include <vector>

#include "dtdsim/autodiff.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/physio_sim.hpp"

using namespace dtdsim;
using ad::Tape;
using ad::Var;

namespace {

double grad1(Var (*f)(Var), double x) {
    Tape t;
    Var v = t.variable(x);
    Var y = f(v);
    t.backward(y);
    return t.adjoint(v);
}

}  // namespace

TEST_CASE("primitive derivatives match closed forms") {
    const double x = 0.7;
    CHECK(grad1([](Var v) { return ad::exp(v); }, x) == doctest::Approx(std::exp(x)));
    CHECK(grad1([](Var v) { return ad::log(v); }, x) == doctest::Approx(1.0 / x));
    CHECK(grad1([](Var v) { return ad::sqrt(v); }, x) == doctest::Approx(0.5 / std::sqrt(x)));
    CHECK(grad1([](Var v) { return ad::tanh(v); }, x) == doctest::Approx(1.0 - std::tanh(x) * std::tanh(x)));
    CHECK(grad1([](Var v) { return ad::softplus(v); }, x) == doctest::Approx(1.0 / (1.0 + std::exp(-x))));
    CHECK(grad1([](Var v) { return ad::abs(v); }, -x) == doctest::Approx(-1.0));
    CHECK(grad1([](Var v) { return ad::relu(v); }, x) == 1.0);
    CHECK(grad1([](Var v) { return ad::relu(v); }, -x) == 0.0);
    CHECK(grad1([](Var v) { return ad::clamp_nonneg(v); }, -x) == 0.0);
    CHECK(grad1([](Var v) { return ad::clamp_nonneg(v); }, x) == 1.0);
    CHECK(grad1([](Var v) { return 3.0 / v; }, x) == doctest::Approx(-3.0 / (x * x)));
    CHECK(grad1([](Var v) { return -v * v; }, x) == doctest::Approx(-2.0 * x));
}

TEST_CASE("binary operators and fan-out accumulate") {
    Tape t;
    Var a = t.variable(2.0), b = t.variable(3.0);
    Var y = a * b + a / b - (a - b) * a;
    t.backward(y);
    // y = ab + a/b - a^2 + ab
    CHECK(y.value() == doctest::Approx(2.0 * 6.0 + 2.0 / 3.0 - 4.0));
    CHECK(t.adjoint(a) == doctest::Approx(2.0 * 3.0 + 1.0 / 3.0 - 4.0));
    CHECK(t.adjoint(b) == doctest::Approx(2.0 * 2.0 - 2.0 / 9.0));
}

TEST_CASE("unary hook uses the supplied slope") {
    Tape t;
    Var v = t.variable(1.5);
    Var y = ad::unary(v, 10.0, -4.0) * 2.0;
    t.backward(y);
    CHECK(y.value() == 20.0);
    CHECK(t.adjoint(v) == -8.0);
}

TEST_CASE("opaque primitive fails loudly on the backward pass") {
    Tape t;
    Var v = t.variable(1.0);
    Var inputs[] = {v};
    Var o = t.opaque("mystery", 2.0, inputs);
    CHECK_THROWS_AS(t.backward(o * v), UnsupportedPrimitiveError);
}

TEST_CASE("multiple outputs with seeds") {
    Tape t;
    Var a = t.variable(1.0);
    Var y1 = a * 2.0, y2 = a * a;
    std::vector<Var> outs{y1, y2};
    std::vector<double> seeds{1.0, 3.0};
    t.backward(outs, seeds);
    CHECK(t.adjoint(a) == doctest::Approx(2.0 + 3.0 * 2.0));
    std::vector<double> short_seeds{1.0};
    CHECK_THROWS_AS(t.backward(outs, short_seeds), DimensionError);
}

TEST_CASE("gradient helper uses a fresh tape per call") {
    ad::LossFn f = [](Tape&, std::span<const Var> p) { return p[0] * p[0] * p[1]; };
    std::vector<double> x{1.5, -2.0};
    const auto r1 = ad::gradient(f, x);
    const auto r2 = ad::gradient(f, x);
    CHECK(r1.value == doctest::Approx(-4.5));
    CHECK(r1.gradient[0] == doctest::Approx(2 * 1.5 * -2.0));
    CHECK(r1.gradient[1] == doctest::Approx(2.25));
    CHECK(r1.gradient == r2.gradient);
}

TEST_CASE("tape gradient of an Euler rollout agrees with central differences") {
    using namespace dtdsim::physio;
    const StaticParams s = load_default_params();
    const PhysioState x0 = steady_state(s, basal_for_glucose(s, 120.0), 120.0);
    const std::vector<Param> which{Param::V_mx, Param::k_abs, Param::k_p1};

    ad::LossFn loss = [&](Tape& t, std::span<const Var> theta) {
        ParamVec<Var> p;
        for (std::size_t i = 0; i < kNumParams; ++i) p[i] = t.constant(s.values[i]);
        for (std::size_t k = 0; k < which.size(); ++k) at(p, which[k]) = ad::exp(theta[k]);
        StateVec<Var> x;
        for (std::size_t i = 0; i < kStateDim; ++i) x[i] = t.constant(x0[i]);
        double meal = 0.0;
        Var acc = t.constant(0.0);
        for (int step = 0; step < 36; ++step) {
            ExogenousInput u{0.05, step == 2 ? 60.0 : 0.0};
            meal = next_meal_mass(meal, u);
            StepOptions o;
            o.meal_mass_mg = meal;
            x = euler_step(x, p, u, 5.0, o);
            const Var g = cgm_observe(x, at(p, Param::V_G));
            acc = acc + (g - 130.0) * (g - 130.0) / 100.0;
        }
        return acc;
    };
    std::vector<double> theta{std::log(s[Param::V_mx]), std::log(s[Param::k_abs]), std::log(s[Param::k_p1])};
    const auto g = ad::gradient(loss, theta);

    auto value = [&](const std::vector<double>& th) {
        Tape t;
        std::vector<Var> leaves;
        for (double v : th) leaves.push_back(t.variable(v));
        return loss(t, leaves).value();
    };
    for (std::size_t k = 0; k < theta.size(); ++k) {
        const double h = 1e-5;
        auto tp = theta, tm = theta;
        tp[k] += h;
        tm[k] -= h;
        const double fd = (value(tp) - value(tm)) / (2 * h);
        CHECK(g.gradient[k] == doctest::Approx(fd).epsilon(1e-4));
    }

    const auto rep = ad::finite_diff_check(loss, theta);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("finite-difference checker flags kinks") {
    ad::ValueFn f = [](std::span<const double> x) { return std::fabs(x[0]) + x[1] * x[1]; };
    std::vector<double> x{0.0, 1.0};
    std::vector<double> exact{0.0, 2.0};
    const auto rep = ad::finite_diff_check(f, x, exact);
    CHECK(rep.coords[0].kink_adjacent);
    CHECK_FALSE(rep.coords[1].kink_adjacent);
    CHECK(rep.kink_count == 1);
    CHECK(rep.max_rel_error < 1e-8);

    std::vector<double> bad{0.0, 2.5};
    CHECK(ad::finite_diff_check(f, x, bad).max_rel_error == doctest::Approx(0.2).epsilon(1e-6));
    std::vector<double> short_grad{1.0};
    CHECK_THROWS_AS(ad::finite_diff_check(f, x, short_grad), DimensionError);
}
