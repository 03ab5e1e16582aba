#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "dtdsim/errors.hpp"
#include "dtdsim/param_link.hpp"
#include "dtdsim/rng.hpp"

using namespace dtdsim;
using namespace dtdsim::link;

namespace {

VectorXd anchors3() {
    VectorXd a(3);
    a << 0.047, 0.057, 2.7;
    return a;
}

LinkNetwork random_net(std::uint64_t seed, Eigen::Index D, Eigen::Index K, Eigen::Index H) {
    VectorXd anchors(K);
    for (Eigen::Index k = 0; k < K; ++k) anchors(k) = 0.5 + k;
    LinkNetwork n = init_link(D, K, seed, anchors, H);
    Rng rng(seed, 1);
    for (Eigen::Index i = 0; i < n.W3.size(); ++i) n.W3.data()[i] = 0.3 * rng.normal();
    for (Eigen::Index i = 0; i < n.b3.size(); ++i) n.b3(i) = 0.3 * rng.normal();
    return n;
}

// Plain forward pass written out layer by layer.
VectorXd reference_forward(const VectorXd& z, const LinkNetwork& n) {
    const VectorXd h1 = (n.W1 * z + n.b1).cwiseMax(0.0);
    const VectorXd h2 = (n.W2 * h1 + n.b2).cwiseMax(0.0);
    const VectorXd r = n.W3 * h2 + n.b3;
    VectorXd out(r.size());
    for (Eigen::Index k = 0; k < r.size(); ++k)
        out(k) = n.anchors(k) * std::log1p(std::exp(r(k) + std::log(std::numbers::e - 1.0)));
    return out;
}

}  // namespace

TEST_CASE("anchored softplus") {
    CHECK(softplus_unit(0.0) == doctest::Approx(1.0).epsilon(1e-15));
    for (double x : {-40.0, -3.0, -0.5, 0.2, 4.0, 40.0}) {
        const double c = std::log(std::numbers::e - 1.0);
        const double expect = x + c > 30.0 ? x + c : std::log1p(std::exp(x + c));
        CHECK(softplus_unit(x) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(softplus_unit(x) > 0.0);
        CHECK(softplus_unit_slope(x) == doctest::Approx(1.0 / (1.0 + std::exp(-(x + c)))).epsilon(1e-12));
        CHECK(softplus_unit_slope(x) <= 1.0);
    }
}

TEST_CASE("zero output layer reproduces the anchors") {
    const LinkNetwork n = init_link(2, 3, 42, anchors3());
    CHECK(n.W1.rows() == kHiddenUnits);
    Rng rng(1);
    for (int k = 0; k < 20; ++k) {
        VectorXd z(2);
        z << 3.0 * rng.normal(), 3.0 * rng.normal();
        CHECK((link::link(z, n) - anchors3()).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("forward pass matches the layer-by-layer oracle") {
    const LinkNetwork n = random_net(9, 3, 2, 16);
    Rng rng(2);
    MatrixXd Z(3, 10);
    for (Eigen::Index i = 0; i < Z.size(); ++i) Z.data()[i] = rng.normal();
    const MatrixXd out = link_batch(Z, n);
    for (Eigen::Index t = 0; t < Z.cols(); ++t) {
        const VectorXd ref = reference_forward(Z.col(t), n);
        CHECK((out.col(t) - ref).norm() < 1e-12);
        CHECK((link::link(Z.col(t), n) - ref).norm() < 1e-12);
    }
}

TEST_CASE("backward pass agrees with central differences") {
    LinkNetwork n = random_net(4, 2, 2, 8);
    Rng rng(6);
    MatrixXd Z(2, 5), G(2, 5);
    for (Eigen::Index i = 0; i < Z.size(); ++i) Z.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < G.size(); ++i) G.data()[i] = rng.normal();

    LinkCache cache;
    link_batch(Z, n, &cache);
    const LinkGrad g = link_backward(G, cache, n);
    std::vector<double> packed(static_cast<std::size_t>(n.num_weights()));
    g.pack_weights(packed);

    auto value = [&](const LinkNetwork& m, const MatrixXd& z) { return (G.array() * link_batch(z, m).array()).sum(); };
    std::vector<double> w(packed.size());
    n.pack(w);
    const double h = 1e-6;
    for (std::size_t i = 0; i < w.size(); ++i) {
        LinkNetwork m = n;
        auto wp = w, wm = w;
        wp[i] += h;
        wm[i] -= h;
        m.unpack(wp);
        const double fp = value(m, Z);
        m.unpack(wm);
        const double fm = value(m, Z);
        CHECK(packed[i] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-5).scale(1e-8));
    }
    for (Eigen::Index i = 0; i < Z.size(); ++i) {
        MatrixXd zp = Z, zm = Z;
        zp.data()[i] += h;
        zm.data()[i] -= h;
        CHECK(g.Z.data()[i] == doctest::Approx((value(n, zp) - value(n, zm)) / (2 * h)).epsilon(1e-5).scale(1e-8));
    }
    for (Eigen::Index k = 0; k < n.anchors.size(); ++k) {
        LinkNetwork m = n;
        m.anchors(k) += h;
        const double fp = value(m, Z);
        m.anchors(k) -= 2 * h;
        const double fm = value(m, Z);
        CHECK(g.anchors(k) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
    }
    CHECK_THROWS_AS(link_backward(MatrixXd::Zero(3, 5), cache, n), DimensionError);
}

TEST_CASE("pack and unpack round trip") {
    const LinkNetwork n = random_net(11, 2, 3, 6);
    CHECK(n.num_weights() == 6 * 2 + 6 + 6 * 6 + 6 + 3 * 6 + 3);
    std::vector<double> w(static_cast<std::size_t>(n.num_weights()));
    n.pack(w);
    LinkNetwork m = init_link(2, 3, 0, n.anchors, 6);
    m.unpack(w);
    CHECK(m.W1 == n.W1);
    CHECK(m.W2 == n.W2);
    CHECK(m.W3 == n.W3);
    CHECK(m.b3 == n.b3);
}

TEST_CASE("initialisation is deterministic in the seed") {
    const auto a = init_link(2, 3, 123, anchors3());
    const auto b = init_link(2, 3, 123, anchors3());
    const auto c = init_link(2, 3, 124, anchors3());
    CHECK(a.W1 == b.W1);
    CHECK(a.W2 == b.W2);
    CHECK(a.W1 != c.W1);
    CHECK(a.W1.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(2.0));
    VectorXd neg = anchors3();
    neg(1) = -1.0;
    CHECK_THROWS_AS(init_link(2, 3, 1, neg), ConfigError);
    CHECK_THROWS_AS(init_link(2, 2, 1, anchors3()), DimensionError);
}

TEST_CASE("Lipschitz bound dominates observed slopes") {
    const LinkNetwork n = random_net(21, 2, 2, 12);
    const double L = lipschitz_bound(n);
    Rng rng(3);
    for (int k = 0; k < 500; ++k) {
        VectorXd z1(2), z2(2);
        z1 << rng.normal(), rng.normal();
        z2 << rng.normal(), rng.normal();
        CHECK((link::link(z1, n) - link::link(z2, n)).norm() <= L * (z1 - z2).norm() + 1e-12);
    }
}

TEST_CASE("JSON round trip") {
    const LinkNetwork n = random_net(5, 2, 2, 4);
    const LinkNetwork m = LinkNetwork::from_json(n.to_json());
    CHECK(m.W1.isApprox(n.W1));
    CHECK(m.W3.isApprox(n.W3));
    CHECK(m.anchors.isApprox(n.anchors));
}
