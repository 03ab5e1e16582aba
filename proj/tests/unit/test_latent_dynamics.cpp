#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "dtdsim/errors.hpp"
#include "dtdsim/latent_dynamics.hpp"
#include "dtdsim/rng.hpp"

using namespace dtdsim;
using namespace dtdsim::latent;

namespace {

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

DynamicsParams random_params(Rng& rng, Eigen::Index D, Eigen::Index J) {
    DynamicsParams p = DynamicsParams::isotropic(D, J);
    p.A = random_matrix(rng, D, D, 0.3);
    p.B = random_matrix(rng, D, J, 0.5);
    p.Q_sqrt = random_matrix(rng, D, D, 0.2).triangularView<Eigen::Lower>();
    for (Eigen::Index i = 0; i < D; ++i) p.Q_sqrt(i, i) = 0.1 + std::fabs(p.Q_sqrt(i, i));
    return p;
}

// Largest eigenvalue modulus via the characteristic roots of a 2 x 2 block.
double radius_2x2(const MatrixXd& A) {
    const double tr = A.trace(), det = A.determinant();
    const std::complex<double> disc = std::sqrt(std::complex<double>(tr * tr / 4.0 - det));
    return std::max(std::abs(tr / 2.0 + disc), std::abs(tr / 2.0 - disc));
}

}  // namespace

TEST_CASE("single transition is A z + B a + Q^{1/2} eps") {
    DynamicsParams p = DynamicsParams::isotropic(2, 1, 0.5, 0.2);
    p.A(0, 1) = 0.25;
    p.B << 1.0, -2.0;
    VectorXd z(2), a(1), e(2);
    z << 4.0, 2.0;
    a << 0.5;
    e << 1.0, -1.0;
    const VectorXd next = transition(z, a, e, p);
    CHECK(next(0) == doctest::Approx(0.5 * 4.0 + 0.25 * 2.0 + 0.5 + 0.2));
    CHECK(next(1) == doctest::Approx(0.5 * 2.0 - 1.0 - 0.2));
}

TEST_CASE("unroll matches repeated transitions") {
    Rng rng(3);
    const auto p = random_params(rng, 3, 2);
    const MatrixXd inputs = random_matrix(rng, 2, 25);
    const MatrixXd eps = random_matrix(rng, 3, 25);
    const VectorXd z0 = random_matrix(rng, 3, 1);
    const MatrixXd path = unroll(z0, inputs, eps, p);
    REQUIRE(path.cols() == 25);
    VectorXd z = z0;
    for (Eigen::Index t = 0; t < 25; ++t) {
        z = p.A * z + p.B * inputs.col(t) + p.Q_sqrt * eps.col(t);
        CHECK((path.col(t) - z).norm() < 1e-12);
    }
}

TEST_CASE("unroll backward agrees with central differences") {
    Rng rng(5);
    const Eigen::Index D = 2, J = 3, T = 15;
    auto p = random_params(rng, D, J);
    const MatrixXd inputs = random_matrix(rng, J, T);
    MatrixXd eps = random_matrix(rng, D, T);
    VectorXd z0 = random_matrix(rng, D, 1);
    const MatrixXd W = random_matrix(rng, D, T);

    auto value = [&](const DynamicsParams& q, const VectorXd& z, const MatrixXd& e) {
        return (W.array() * unroll(z, inputs, e, q).array()).sum();
    };
    const MatrixXd path = unroll(z0, inputs, eps, p);
    const UnrollGrad g = unroll_backward(W, z0, path, inputs, eps, p);
    const double h = 1e-6;

    auto check_matrix = [&](MatrixXd& m, const MatrixXd& grad, bool lower_only) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                if (lower_only && j > i) continue;
                const double keep = m(i, j);
                m(i, j) = keep + h;
                const double fp = value(p, z0, eps);
                m(i, j) = keep - h;
                const double fm = value(p, z0, eps);
                m(i, j) = keep;
                CHECK(grad(i, j) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
            }
    };
    check_matrix(p.A, g.A, false);
    check_matrix(p.B, g.B, false);
    check_matrix(p.Q_sqrt, g.Q_sqrt, true);
    MatrixXd z0m = z0;
    for (Eigen::Index i = 0; i < D; ++i) {
        z0m(i, 0) += h;
        const double fp = value(p, z0m.col(0), eps);
        z0m(i, 0) -= 2 * h;
        const double fm = value(p, z0m.col(0), eps);
        z0m(i, 0) += h;
        CHECK(g.z0(i) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
    }
    for (Eigen::Index t : {Eigen::Index{0}, T / 2, T - 1}) {
        for (Eigen::Index i = 0; i < D; ++i) {
            const double keep = eps(i, t);
            eps(i, t) = keep + h;
            const double fp = value(p, z0, eps);
            eps(i, t) = keep - h;
            const double fm = value(p, z0, eps);
            eps(i, t) = keep;
            CHECK(g.eps(i, t) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
        }
    }
}

TEST_CASE("trace penalty and its gradient") {
    MatrixXd A(2, 2);
    A << 1.2, 5.0, -3.0, 1.1;
    CHECK(stability_penalty(A, 2.0) == doctest::Approx(2.0 * 0.3));
    CHECK(stability_penalty(A, 1.0, PenaltyMode::Signed) == doctest::Approx(0.3));
    CHECK(stability_penalty_grad(A, 2.0).isApprox(2.0 * MatrixXd::Identity(2, 2)));
    A(0, 0) = 0.4;
    CHECK(stability_penalty(A) == doctest::Approx(0.5));
    CHECK(stability_penalty(A, 1.0, PenaltyMode::Signed) == doctest::Approx(-0.5));
    CHECK(stability_penalty_grad(A).isApprox(-MatrixXd::Identity(2, 2)));
    CHECK(stability_penalty_grad(A, 1.0, PenaltyMode::Signed).isApprox(MatrixXd::Identity(2, 2)));
}

TEST_CASE("spectral radius of 2 x 2 matrices matches the characteristic roots") {
    Rng rng(8);
    for (int k = 0; k < 200; ++k) {
        const MatrixXd A = random_matrix(rng, 2, 2);
        CHECK(spectral_radius(A) == doctest::Approx(radius_2x2(A)).epsilon(1e-10));
    }
}

TEST_CASE("projection leaves stable matrices alone and clips unstable ones") {
    Rng rng(13);
    MatrixXd stable(2, 2);
    stable << 0.5, 0.2, -0.1, 0.7;
    CHECK((spectral_project(stable) - stable).norm() < 1e-12);

    // Scaled rotation: eigenvalues 2 e^{+-i theta} map onto e^{+-i theta}.
    const double th = 0.4;
    MatrixXd rot(2, 2);
    rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    CHECK((spectral_project(2.0 * rot) - rot).norm() < 1e-10);

    // Mixed spectrum: diag(3, 0.5) keeps the stable eigenvalue.
    MatrixXd mixed = MatrixXd::Zero(2, 2);
    mixed(0, 0) = 3.0;
    mixed(1, 1) = 0.5;
    const MatrixXd pm = spectral_project(mixed);
    CHECK(pm(0, 0) == doctest::Approx(1.0));
    CHECK(pm(1, 1) == doctest::Approx(0.5));

    for (int k = 0; k < 300; ++k) {
        const Eigen::Index D = 2 + k % 4;
        const MatrixXd A = random_matrix(rng, D, D, 1.5);
        const MatrixXd P = spectral_project(A);
        CHECK(spectral_radius(P) <= 1.0 + 1e-9);
        CHECK(P.allFinite());
    }
}

TEST_CASE("defective matrices fall back to global scaling") {
    MatrixXd J(2, 2);
    J << 2.0, 1.0, 0.0, 2.0;
    CHECK(std::isinf(eigen_condition(J)));
    const MatrixXd P = spectral_project(J);
    CHECK(spectral_radius(P) <= 1.0 + 1e-9);
    CHECK((P - J / 2.0).norm() < 1e-9);
}

TEST_CASE("eigen condition of a normal matrix is one") {
    MatrixXd D = MatrixXd::Zero(3, 3);
    D.diagonal() << 0.9, -0.5, 0.1;
    CHECK(eigen_condition(D) == doctest::Approx(1.0));
}

TEST_CASE("isotropic construction and dimension checks") {
    const auto p = DynamicsParams::isotropic(3, 5, 0.9, 0.2);
    CHECK(p.A.isApprox(0.9 * MatrixXd::Identity(3, 3)));
    CHECK(p.B.isZero());
    CHECK(p.Q_sqrt.isApprox(0.2 * MatrixXd::Identity(3, 3)));
    CHECK(p.mu0.isZero());
    CHECK(p.Sigma0_sqrt.isApprox(MatrixXd::Identity(3, 3)));
    CHECK_NOTHROW(p.check());

    auto bad = p;
    bad.B = MatrixXd::Zero(2, 5);
    CHECK_THROWS_AS(bad.check(), DimensionError);

    const auto back = DynamicsParams::from_json(p.to_json());
    CHECK(back.A.isApprox(p.A));
    CHECK(back.B.rows() == 3);
    CHECK(back.B.cols() == 5);
}

TEST_CASE("time-of-day covariates") {
    const std::vector<double> minutes{0.0, 360.0, 720.0, 1080.0};
    const std::vector<double> energy{10.0, 20.0, NAN, 30.0};
    const MatrixXd a = build_covariates(minutes, energy, CovariateScaling{20.0, 5.0});
    REQUIRE(a.rows() == kDefaultCovariates);
    CHECK(a(0, 1) == doctest::Approx(1.0));
    CHECK(a(1, 2) == doctest::Approx(-1.0));
    CHECK(a(2, 0) == doctest::Approx(0.0));
    CHECK(a(3, 1) == doctest::Approx(-1.0));
    CHECK(a(4, 0) == doctest::Approx(-2.0));
    CHECK(a(4, 2) == 0.0);
    CHECK(a(4, 3) == doctest::Approx(2.0));
    const std::vector<double> short_energy{1.0};
    CHECK_THROWS_AS(build_covariates(minutes, short_energy, {}), DimensionError);
}
