#include "dtdsim/param_link.hpp"

#include <cmath>
#include <random>

#include "dtdsim/errors.hpp"
#include "dtdsim/json_eigen.hpp"

namespace dtdsim::link {

namespace {

// ln(e - 1): softplus of this offset is exactly 1.
const double kOffset = std::log(std::exp(1.0) - 1.0);

double softplus(double x) { return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x))); }

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void fill_uniform(Eigen::Ref<MatrixXd> m, double bound, std::mt19937_64& rng) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = bound * (2.0 * uniform01(rng) - 1.0);
}

template <class Visitor>
void for_each_block(const LinkNetwork& net, Visitor&& v) {
    v(net.W1.data(), net.W1.size());
    v(net.b1.data(), net.b1.size());
    v(net.W2.data(), net.W2.size());
    v(net.b2.data(), net.b2.size());
    v(net.W3.data(), net.W3.size());
    v(net.b3.data(), net.b3.size());
}

}  // namespace

double softplus_unit(double x) { return softplus(x + kOffset); }

double softplus_unit_slope(double x) { return 1.0 / (1.0 + std::exp(-(x + kOffset))); }

Eigen::Index LinkNetwork::num_weights() const noexcept {
    return W1.size() + b1.size() + W2.size() + b2.size() + W3.size() + b3.size();
}

void LinkNetwork::pack(std::span<double> out) const {
    if (static_cast<Eigen::Index>(out.size()) != num_weights()) throw DimensionError("LinkNetwork::pack: size");
    std::size_t pos = 0;
    for_each_block(*this, [&](const double* p, Eigen::Index n) {
        std::copy(p, p + n, out.begin() + static_cast<std::ptrdiff_t>(pos));
        pos += static_cast<std::size_t>(n);
    });
}

void LinkNetwork::unpack(std::span<const double> in) {
    if (static_cast<Eigen::Index>(in.size()) != num_weights()) throw DimensionError("LinkNetwork::unpack: size");
    std::size_t pos = 0;
    for_each_block(*this, [&](const double* p, Eigen::Index n) {
        std::copy(in.begin() + static_cast<std::ptrdiff_t>(pos), in.begin() + static_cast<std::ptrdiff_t>(pos + n),
                  const_cast<double*>(p));
        pos += static_cast<std::size_t>(n);
    });
}

nlohmann::json LinkNetwork::to_json() const {
    return {{"W1", matrix_to_json(W1)}, {"b1", vector_to_json(b1)}, {"W2", matrix_to_json(W2)},
            {"b2", vector_to_json(b2)}, {"W3", matrix_to_json(W3)}, {"b3", vector_to_json(b3)},
            {"anchors", vector_to_json(anchors)}};
}

LinkNetwork LinkNetwork::from_json(const nlohmann::json& j) {
    LinkNetwork n;
    n.W1 = matrix_from_json(j.at("W1"));
    n.b1 = vector_from_json(j.at("b1"));
    n.W2 = matrix_from_json(j.at("W2"));
    n.b2 = vector_from_json(j.at("b2"));
    n.W3 = matrix_from_json(j.at("W3"));
    n.b3 = vector_from_json(j.at("b3"));
    n.anchors = vector_from_json(j.at("anchors"));
    if (n.b1.size() != n.W1.rows() || n.W2.cols() != n.W1.rows() || n.b2.size() != n.W2.rows() ||
        n.W3.cols() != n.W2.rows() || n.b3.size() != n.W3.rows() || n.anchors.size() != n.W3.rows()) {
        throw ConfigError("link network layer shapes are inconsistent");
    }
    return n;
}

LinkNetwork init_link(Eigen::Index D, Eigen::Index K, std::uint64_t seed, const VectorXd& anchors,
                      Eigen::Index hidden) {
    if (D < 1 || K < 1) throw DimensionError("init_link needs D >= 1 and K >= 1");
    if (anchors.size() != K) throw DimensionError("init_link: one anchor per output required");
    if ((anchors.array() <= 0.0).any()) throw ConfigError("link anchors must be positive");
    std::mt19937_64 rng(seed);
    LinkNetwork n;
    n.W1.resize(hidden, D);
    n.b1.resize(hidden);
    n.W2.resize(hidden, hidden);
    n.b2.resize(hidden);
    const double bound1 = 1.0 / std::sqrt(static_cast<double>(D));
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    fill_uniform(n.W1, bound1, rng);
    fill_uniform(n.b1, bound1, rng);
    fill_uniform(n.W2, bound2, rng);
    fill_uniform(n.b2, bound2, rng);
    n.W3 = MatrixXd::Zero(K, hidden);
    n.b3 = VectorXd::Zero(K);
    n.anchors = anchors;
    return n;
}

MatrixXd link_batch(const MatrixXd& Z, const LinkNetwork& net, LinkCache* cache) {
    if (Z.rows() != net.input_dim()) throw DimensionError("link: latent dimension does not match the network");
    MatrixXd H1 = ((net.W1 * Z).colwise() + net.b1).cwiseMax(0.0);
    MatrixXd H2 = ((net.W2 * H1).colwise() + net.b2).cwiseMax(0.0);
    MatrixXd R = (net.W3 * H2).colwise() + net.b3;
    MatrixXd out(R.rows(), R.cols());
    for (Eigen::Index t = 0; t < R.cols(); ++t)
        for (Eigen::Index k = 0; k < R.rows(); ++k) out(k, t) = net.anchors(k) * softplus_unit(R(k, t));
    if (cache != nullptr) {
        cache->Z = Z;
        cache->H1 = std::move(H1);
        cache->H2 = std::move(H2);
        cache->R = std::move(R);
    }
    return out;
}

VectorXd link(const VectorXd& z, const LinkNetwork& net) { return link_batch(MatrixXd(z), net).col(0); }

LinkGrad link_backward(const MatrixXd& g_out, const LinkCache& cache, const LinkNetwork& net) {
    const auto K = net.output_dim();
    const auto T = cache.R.cols();
    if (g_out.rows() != K || g_out.cols() != T) throw DimensionError("link_backward: adjoint shape");
    LinkGrad g;
    MatrixXd gR(K, T);
    g.anchors = VectorXd::Zero(K);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index k = 0; k < K; ++k) {
            const double r = cache.R(k, t);
            gR(k, t) = g_out(k, t) * net.anchors(k) * softplus_unit_slope(r);
            g.anchors(k) += g_out(k, t) * softplus_unit(r);
        }
    }
    g.W3.noalias() = gR * cache.H2.transpose();
    g.b3 = gR.rowwise().sum();
    MatrixXd gH2 = net.W3.transpose() * gR;
    gH2.array() *= (cache.H2.array() > 0.0).cast<double>();
    g.W2.noalias() = gH2 * cache.H1.transpose();
    g.b2 = gH2.rowwise().sum();
    MatrixXd gH1 = net.W2.transpose() * gH2;
    gH1.array() *= (cache.H1.array() > 0.0).cast<double>();
    g.W1.noalias() = gH1 * cache.Z.transpose();
    g.b1 = gH1.rowwise().sum();
    g.Z.noalias() = net.W1.transpose() * gH1;
    return g;
}

void LinkGrad::pack_weights(std::span<double> out) const {
    std::size_t pos = 0;
    auto put = [&](const double* p, Eigen::Index n) {
        if (pos + static_cast<std::size_t>(n) > out.size()) throw DimensionError("LinkGrad::pack_weights: size");
        std::copy(p, p + n, out.begin() + static_cast<std::ptrdiff_t>(pos));
        pos += static_cast<std::size_t>(n);
    };
    put(W1.data(), W1.size());
    put(b1.data(), b1.size());
    put(W2.data(), W2.size());
    put(b2.data(), b2.size());
    put(W3.data(), W3.size());
    put(b3.data(), b3.size());
    if (pos != out.size()) throw DimensionError("LinkGrad::pack_weights: size");
}

double lipschitz_bound(const LinkNetwork& net) {
    auto op_norm = [](const MatrixXd& m) {
        if (m.size() == 0) return 0.0;
        Eigen::JacobiSVD<MatrixXd> svd(m);
        return svd.singularValues()(0);
    };
    // ReLU and the output transform are 1-Lipschitz; anchors scale rows.
    return net.anchors.cwiseAbs().maxCoeff() * op_norm(net.W3) * op_norm(net.W2) * op_norm(net.W1);
}

}  // namespace dtdsim::link
