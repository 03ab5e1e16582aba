#pragma once

// Neural link d_t = NN(z_t): a two-hidden-layer ReLU perceptron whose K
// outputs pass through an anchored softplus so that a zero raw output
// reproduces the anchor (literature default) parameter exactly.

#include <cstdint>
#include <span>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace dtdsim::link {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr Eigen::Index kHiddenUnits = 128;

/// softplus(x + ln(e - 1)); equals 1 at x = 0, positive everywhere.
double softplus_unit(double x);
/// Derivative of softplus_unit, bounded by 1.
double softplus_unit_slope(double x);

struct LinkNetwork {
    MatrixXd W1;  // H x D
    VectorXd b1;
    MatrixXd W2;  // H x H
    VectorXd b2;
    MatrixXd W3;  // K x H
    VectorXd b3;
    VectorXd anchors;  // K, strictly positive

    Eigen::Index input_dim() const noexcept { return W1.cols(); }
    Eigen::Index output_dim() const noexcept { return W3.rows(); }

    /// Number of trainable weights (anchors excluded).
    Eigen::Index num_weights() const noexcept;
    void pack(std::span<double> out) const;
    void unpack(std::span<const double> in);

    nlohmann::json to_json() const;
    static LinkNetwork from_json(const nlohmann::json& j);
};

/// Fan-in scaled uniform hidden layers, zero output layer. Deterministic in
/// `seed` across platforms.
LinkNetwork init_link(Eigen::Index D, Eigen::Index K, std::uint64_t seed, const VectorXd& anchors,
                      Eigen::Index hidden = kHiddenUnits);

VectorXd link(const VectorXd& z, const LinkNetwork& net);

/// Activations kept for the backward pass.
struct LinkCache {
    MatrixXd Z, H1, H2, R;
};

/// Batched forward over the columns of `Z` (D x T); returns K x T.
MatrixXd link_batch(const MatrixXd& Z, const LinkNetwork& net, LinkCache* cache = nullptr);

struct LinkGrad {
    MatrixXd W1, W2, W3;
    VectorXd b1, b2, b3;
    VectorXd anchors;
    MatrixXd Z;  // adjoint of the inputs, D x T

    /// Weights gradient in `LinkNetwork::pack` order.
    void pack_weights(std::span<double> out) const;
};

LinkGrad link_backward(const MatrixXd& g_out, const LinkCache& cache, const LinkNetwork& net);

/// Upper bound on the Lipschitz constant of `link` in z (2-norms).
double lipschitz_bound(const LinkNetwork& net);

}  // namespace dtdsim::link
