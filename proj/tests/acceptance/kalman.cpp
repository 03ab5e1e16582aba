#include "kalman.hpp"

#include <cmath>
#include <numbers>

namespace dtdsim::acceptance {

double kalman_loglik(const LinearGaussianModel& m, const Eigen::VectorXd& y, const Eigen::MatrixXd& a) {
    Eigen::VectorXd mean = m.mu0;
    Eigen::MatrixXd P = m.Sigma0_sqrt * m.Sigma0_sqrt.transpose();
    const Eigen::MatrixXd Q = m.Q_sqrt * m.Q_sqrt.transpose();
    const double r = m.sigma * m.sigma;
    double ll = 0.0;
    for (Eigen::Index t = 0; t < y.size(); ++t) {
        mean = m.A * mean + m.B * a.col(t);
        P = m.A * P * m.A.transpose() + Q;
        if (std::isnan(y(t))) continue;
        const double s = m.h.dot(P * m.h) + r;
        const double v = y(t) - m.h.dot(mean) - m.c;
        ll -= 0.5 * (std::log(2.0 * std::numbers::pi * s) + v * v / s);
        const Eigen::VectorXd k = P * m.h / s;
        mean += k * v;
        // Joseph form keeps P symmetric positive semi-definite.
        const Eigen::MatrixXd I_kh = Eigen::MatrixXd::Identity(P.rows(), P.cols()) - k * m.h.transpose();
        P = I_kh * P * I_kh.transpose() + r * k * k.transpose();
    }
    return ll;
}

}  // namespace dtdsim::acceptance
