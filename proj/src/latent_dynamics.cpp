#include "dtdsim/latent_dynamics.hpp"

#include <cmath>
#include <complex>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "dtdsim/errors.hpp"
#include "dtdsim/json_eigen.hpp"

namespace dtdsim::latent {

DynamicsParams DynamicsParams::isotropic(Eigen::Index D, Eigen::Index J, double a_diag, double q) {
    DynamicsParams p;
    p.A = a_diag * MatrixXd::Identity(D, D);
    p.B = MatrixXd::Zero(D, J);
    p.Q_sqrt = q * MatrixXd::Identity(D, D);
    p.mu0 = VectorXd::Zero(D);
    p.Sigma0_sqrt = MatrixXd::Identity(D, D);
    return p;
}

void DynamicsParams::check() const {
    const auto D = A.rows();
    if (A.cols() != D || B.rows() != D || Q_sqrt.rows() != D || Q_sqrt.cols() != D || mu0.size() != D ||
        Sigma0_sqrt.rows() != D || Sigma0_sqrt.cols() != D) {
        throw DimensionError("dynamics parameters have inconsistent shapes");
    }
}

nlohmann::json DynamicsParams::to_json() const {
    return {{"A", matrix_to_json(A)},
            {"B", matrix_to_json(B)},
            {"Q_sqrt", matrix_to_json(Q_sqrt)},
            {"mu0", vector_to_json(mu0)},
            {"Sigma0_sqrt", matrix_to_json(Sigma0_sqrt)}};
}

DynamicsParams DynamicsParams::from_json(const nlohmann::json& j) {
    DynamicsParams p;
    p.A = matrix_from_json(j.at("A"));
    p.B = matrix_from_json(j.at("B"));
    p.Q_sqrt = matrix_from_json(j.at("Q_sqrt"));
    p.mu0 = vector_from_json(j.at("mu0"));
    p.Sigma0_sqrt = matrix_from_json(j.at("Sigma0_sqrt"));
    p.check();
    return p;
}

VectorXd transition(const VectorXd& z_prev, const VectorXd& a, const VectorXd& eps, const DynamicsParams& p) {
    if (z_prev.size() != p.dim() || eps.size() != p.dim() || a.size() != p.input_dim()) {
        throw DimensionError("transition: vector sizes do not match the dynamics");
    }
    return p.A * z_prev + p.B * a + p.Q_sqrt.triangularView<Eigen::Lower>() * eps;
}

MatrixXd unroll(const VectorXd& z0, const MatrixXd& inputs, const MatrixXd& eps, const DynamicsParams& p) {
    const auto D = p.dim();
    if (inputs.cols() != eps.cols()) throw DimensionError("unroll: input and noise sequences differ in length");
    if (z0.size() != D || eps.rows() != D || inputs.rows() != p.input_dim()) {
        throw DimensionError("unroll: sequence shapes do not match the dynamics");
    }
    const auto T = eps.cols();
    // The input and noise terms do not depend on the recursion; batch them.
    MatrixXd path = p.B * inputs;
    path.noalias() += p.Q_sqrt.triangularView<Eigen::Lower>() * eps;
    VectorXd prev = z0;
    for (Eigen::Index t = 0; t < T; ++t) {
        path.col(t).noalias() += p.A * prev;
        prev = path.col(t);
    }
    return path;
}

UnrollGrad unroll_backward(const MatrixXd& g_path, const VectorXd& z0, const MatrixXd& path, const MatrixXd& inputs,
                           const MatrixXd& eps, const DynamicsParams& p) {
    const auto D = p.dim();
    const auto T = path.cols();
    // Adjoint of z_t accumulates the direct term and the carry from z_{t+1}.
    MatrixXd g_z = g_path;
    for (Eigen::Index t = T - 1; t > 0; --t) g_z.col(t - 1).noalias() += p.A.transpose() * g_z.col(t);

    UnrollGrad g;
    MatrixXd prev(D, T);
    if (T > 0) {
        prev.col(0) = z0;
        if (T > 1) prev.rightCols(T - 1) = path.leftCols(T - 1);
    }
    g.A = g_z * prev.transpose();
    g.B = g_z * inputs.transpose();
    g.Q_sqrt = (g_z * eps.transpose()).triangularView<Eigen::Lower>();
    g.eps = p.Q_sqrt.triangularView<Eigen::Lower>().transpose() * g_z;
    g.z0 = T > 0 ? VectorXd(p.A.transpose() * g_z.col(0)) : VectorXd::Zero(D);
    return g;
}

double stability_penalty(const MatrixXd& A, double weight, PenaltyMode mode) {
    const double diff = A.trace() - static_cast<double>(A.rows());
    return weight * (mode == PenaltyMode::Absolute ? std::fabs(diff) : diff);
}

MatrixXd stability_penalty_grad(const MatrixXd& A, double weight, PenaltyMode mode) {
    const double diff = A.trace() - static_cast<double>(A.rows());
    double slope = 1.0;
    if (mode == PenaltyMode::Absolute) slope = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    return weight * slope * MatrixXd::Identity(A.rows(), A.cols());
}

double spectral_radius(const MatrixXd& A) {
    if (A.size() == 0) return 0.0;
    Eigen::EigenSolver<MatrixXd> es(A, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

double eigen_condition(const MatrixXd& A) {
    Eigen::EigenSolver<MatrixXd> es(A, true);
    if (es.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Eigen::MatrixXcd V = es.eigenvectors();
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(V);
    const auto& sv = svd.singularValues();
    const double smin = sv(sv.size() - 1);
    if (!(smin > 1e-10 * sv(0))) return std::numeric_limits<double>::infinity();
    return sv(0) / smin;
}

MatrixXd spectral_project(const MatrixXd& A) {
    if (A.rows() != A.cols()) throw DimensionError("spectral_project needs a square matrix");
    if (A.size() == 0) return A;
    Eigen::EigenSolver<MatrixXd> es(A, true);
    const Eigen::VectorXcd lambda = es.eigenvalues();
    const double rho = lambda.cwiseAbs().maxCoeff();
    if (rho <= 1.0) return A;

    auto scale_whole = [&] { return MatrixXd(A / rho); };
    if (es.info() != Eigen::Success) return scale_whole();

    const Eigen::MatrixXcd V = es.eigenvectors();
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(V);
    const auto& sv = svd.singularValues();
    if (!(sv(sv.size() - 1) > 1e-10 * sv(0))) return scale_whole();

    Eigen::VectorXcd clipped = lambda;
    for (Eigen::Index i = 0; i < clipped.size(); ++i) {
        const double mod = std::abs(clipped(i));
        if (mod > 1.0) clipped(i) /= mod;
    }
    const Eigen::MatrixXcd rebuilt = V * clipped.asDiagonal() * V.inverse();
    MatrixXd out = rebuilt.real();
    // Reconstruction error can push the radius a hair above one.
    const double rho_out = spectral_radius(out);
    if (!(rho_out <= 1.0 + 1e-12)) {
        if (!std::isfinite(rho_out)) return scale_whole();
        out /= rho_out;
    }
    return out;
}

MatrixXd build_covariates(std::span<const double> minute_of_day, std::span<const double> energy,
                          const CovariateScaling& scaling) {
    if (minute_of_day.size() != energy.size()) throw DimensionError("covariates: channel lengths differ");
    const auto T = static_cast<Eigen::Index>(minute_of_day.size());
    MatrixXd a(kDefaultCovariates, T);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const double sd = scaling.energy_sd > 0.0 ? scaling.energy_sd : 1.0;
    for (Eigen::Index t = 0; t < T; ++t) {
        const double phase = minute_of_day[static_cast<std::size_t>(t)] / 1440.0;
        a(0, t) = std::sin(two_pi * phase);
        a(1, t) = std::cos(two_pi * phase);
        a(2, t) = std::sin(2.0 * two_pi * phase);
        a(3, t) = std::cos(2.0 * two_pi * phase);
        const double e = energy[static_cast<std::size_t>(t)];
        a(4, t) = std::isfinite(e) ? (e - scaling.energy_mean) / sd : 0.0;
    }
    return a;
}

}  // namespace dtdsim::latent
