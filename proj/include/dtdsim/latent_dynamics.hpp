#pragma once

// Linear-Gaussian latent process z_t = A z_{t-1} + B a_t + Q^{1/2} eps_t and
// the machinery that keeps A stable during fitting.

#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace dtdsim::latent {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DynamicsParams {
    MatrixXd A;           // D x D
    MatrixXd B;           // D x J
    MatrixXd Q_sqrt;      // D x D lower triangular, positive diagonal
    VectorXd mu0;         // D
    MatrixXd Sigma0_sqrt; // D x D lower triangular, positive diagonal

    Eigen::Index dim() const noexcept { return A.rows(); }
    Eigen::Index input_dim() const noexcept { return B.cols(); }

    /// A = a_diag * I, B = 0, Q^{1/2} = q * I,
    /// mu0 = 0, Sigma0^{1/2} = I.
    static DynamicsParams isotropic(Eigen::Index D, Eigen::Index J, double a_diag = 0.95, double q = 0.1);

    void check() const;  // throws DimensionError

    nlohmann::json to_json() const;
    static DynamicsParams from_json(const nlohmann::json& j);
};

VectorXd transition(const VectorXd& z_prev, const VectorXd& a, const VectorXd& eps, const DynamicsParams& p);

/// Columns z_1..z_T of the latent path. `inputs` is J x T and `eps` D x T.
MatrixXd unroll(const VectorXd& z0, const MatrixXd& inputs, const MatrixXd& eps, const DynamicsParams& p);

struct UnrollGrad {
    MatrixXd A, B, Q_sqrt;  // Q_sqrt gradient restricted to the lower triangle
    VectorXd z0;
    MatrixXd eps;
};

/// Vector-Jacobian product of `unroll` for the upstream adjoint `g_path`
/// (D x T).
UnrollGrad unroll_backward(const MatrixXd& g_path, const VectorXd& z0, const MatrixXd& path, const MatrixXd& inputs,
                           const MatrixXd& eps, const DynamicsParams& p);

enum class PenaltyMode { Absolute, Signed };

/// weight * |trace(A) - D| (or the signed difference).
double stability_penalty(const MatrixXd& A, double weight = 1.0, PenaltyMode mode = PenaltyMode::Absolute);
/// d penalty / dA.
MatrixXd stability_penalty_grad(const MatrixXd& A, double weight = 1.0, PenaltyMode mode = PenaltyMode::Absolute);

double spectral_radius(const MatrixXd& A);

/// Rescales every eigenvalue of modulus > 1 onto the unit circle, keeping its
/// argument, and rebuilds the real matrix. Matrices whose eigenbasis is
/// numerically singular are scaled as a whole by 1/rho(A) instead.
MatrixXd spectral_project(const MatrixXd& A);

/// ||V|| ||V^{-1}|| for the eigenvector matrix V (2-norm), i.e. the constant c
/// in ||A^k|| <= c rho(A)^k for diagonalisable A. Infinity if defective
/// (smallest singular value of V below 1e-10 of the largest).
double eigen_condition(const MatrixXd& A);

/// Default covariates per grid step: sin/cos of the time of day at 24 h and
/// 12 h periods, plus the energy channel standardised with (mean, sd).
struct CovariateScaling {
    double energy_mean = 0.0;
    double energy_sd = 1.0;
};

inline constexpr Eigen::Index kDefaultCovariates = 5;

MatrixXd build_covariates(std::span<const double> minute_of_day, std::span<const double> energy,
                          const CovariateScaling& scaling);

}  // namespace dtdsim::latent
