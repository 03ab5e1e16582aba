#include "dtdsim/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "dtdsim/autodiff.hpp"
#include "dtdsim/errors.hpp"
#include "dtdsim/json_eigen.hpp"

namespace dtdsim::infer {

using physio::Comp;
using physio::Param;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Index tri_size(Index D) { return D * (D + 1) / 2; }

void pack_tri(const MatrixXd& L, double* out) {
    Index k = 0;
    for (Index j = 0; j < L.cols(); ++j)
        for (Index i = j; i < L.rows(); ++i) out[k++] = i == j ? std::log(L(i, i)) : L(i, j);
}

MatrixXd unpack_tri(const double* in, Index D) {
    MatrixXd L = MatrixXd::Zero(D, D);
    Index k = 0;
    for (Index j = 0; j < D; ++j)
        for (Index i = j; i < D; ++i) L(i, j) = i == j ? std::exp(in[k++]) : in[k++];
    return L;
}

/// Gradient w.r.t. the packed factor from the gradient w.r.t. L.
void pack_tri_grad(const MatrixXd& gL, const MatrixXd& L, double* out) {
    Index k = 0;
    for (Index j = 0; j < L.cols(); ++j)
        for (Index i = j; i < L.rows(); ++i) out[k++] = i == j ? gL(i, i) * L(i, i) : gL(i, j);
}

double floored_exp(double v) { return std::max(std::exp(v), kMinPosteriorSd); }
double floored_exp_slope(double v) { return std::exp(v) > kMinPosteriorSd ? std::exp(v) : 0.0; }

}  // namespace

// ---- variational posterior ---------------------------------------------------

MatrixXd VariationalPosterior::s() const { return log_s.unaryExpr(&floored_exp); }
VectorXd VariationalPosterior::s0() const { return log_s0.unaryExpr(&floored_exp); }

VariationalPosterior VariationalPosterior::standard(Index D, Index T, double sd) {
    VariationalPosterior q;
    q.m0 = VectorXd::Zero(D);
    q.log_s0 = VectorXd::Constant(D, std::log(sd));
    q.m = MatrixXd::Zero(D, T);
    q.log_s = MatrixXd::Constant(D, T, std::log(sd));
    return q;
}

void VariationalPosterior::check() const {
    if (m0.size() != m.rows() || log_s0.size() != m.rows() || log_s.rows() != m.rows() || log_s.cols() != m.cols()) {
        throw DimensionError("variational posterior blocks have inconsistent shapes");
    }
}

nlohmann::json VariationalPosterior::to_json() const {
    return {{"m0", vector_to_json(m0)}, {"log_s0", vector_to_json(log_s0)}, {"m", matrix_to_json(m)},
            {"log_s", matrix_to_json(log_s)}};
}

VariationalPosterior VariationalPosterior::from_json(const nlohmann::json& j) {
    VariationalPosterior q;
    q.m0 = vector_from_json(j.at("m0"));
    q.log_s0 = vector_from_json(j.at("log_s0"));
    q.m = matrix_from_json(j.at("m"));
    q.log_s = matrix_from_json(j.at("log_s"));
    q.check();
    return q;
}

NoiseDraw draw_noise(Index D, Index T, Rng& rng) {
    NoiseDraw n;
    n.eta0 = rng.normal_vector(D);
    n.eta = rng.normal_matrix(D, T);
    return n;
}

EpsSample apply_noise(const VariationalPosterior& q, const NoiseDraw& n) {
    if (n.eta.rows() != q.dim() || n.eta.cols() != q.length() || n.eta0.size() != q.dim()) {
        throw DimensionError("noise draw does not match the posterior shape");
    }
    return {q.m0 + q.s0().cwiseProduct(n.eta0), q.m + q.s().cwiseProduct(n.eta)};
}

EpsSample sample_q(const VariationalPosterior& q, Rng& rng) { return apply_noise(q, draw_noise(q.dim(), q.length(), rng)); }

double kl_term(const VariationalPosterior& q) {
    auto part = [](const auto& m, const auto& log_s) {
        double kl = 0.0;
        for (Index c = 0; c < m.cols(); ++c) {
            for (Index r = 0; r < m.rows(); ++r) {
                const double s = floored_exp(log_s(r, c));
                kl += 0.5 * (m(r, c) * m(r, c) + s * s - 1.0) - std::log(s);
            }
        }
        return kl;
    };
    return part(q.m0, q.log_s0) + part(q.m, q.log_s);
}

// ---- emissions -------------------------------------------------------------------

void LinearEmission::get_params(std::span<double> out) const {
    for (Index i = 0; i < h_.size(); ++i) out[static_cast<std::size_t>(i)] = h_(i);
    out[static_cast<std::size_t>(h_.size())] = c_;
}

void LinearEmission::set_params(std::span<const double> in) {
    for (Index i = 0; i < h_.size(); ++i) h_(i) = in[static_cast<std::size_t>(i)];
    c_ = in[static_cast<std::size_t>(h_.size())];
}

bool LinearEmission::forward(const MatrixXd& Z, VectorXd& mean) {
    if (Z.rows() != h_.size()) throw DimensionError("linear emission: latent dimension mismatch");
    Z_ = Z;
    mean = (Z.transpose() * h_).array() + c_;
    return true;
}

void LinearEmission::backward(const VectorXd& g_mean, MatrixXd& g_Z, std::span<double> g_params) {
    g_Z = h_ * g_mean.transpose();
    const VectorXd gh = Z_ * g_mean;
    for (Index i = 0; i < h_.size(); ++i) g_params[static_cast<std::size_t>(i)] += gh(i);
    g_params[static_cast<std::size_t>(h_.size())] += g_mean.sum();
}

SimulatorEmission::SimulatorEmission(link::LinkNetwork net, physio::StaticParams s, std::vector<Param> k_set,
                                     std::vector<Param> fitted_static, physio::PhysioState x0,
                                     std::vector<physio::ExogenousInput> inputs, double initial_meal_mass_mg,
                                     int substeps)
    : net_(std::move(net)),
      s_(s),
      k_set_(std::move(k_set)),
      fitted_(std::move(fitted_static)),
      x0_(x0),
      u_(std::move(inputs)),
      substeps_(substeps) {
    if (net_.output_dim() != static_cast<Index>(k_set_.size())) {
        throw DimensionError("link output dimension differs from the number of dynamic parameters");
    }
    meal_mass_.resize(u_.size());
    double mm = initial_meal_mass_mg;
    for (std::size_t t = 0; t < u_.size(); ++t) {
        mm = physio::next_meal_mass(mm, u_[t]);
        meal_mass_[t] = mm;
    }
    for (std::size_t i = 0; i < k_set_.size(); ++i) net_.anchors(static_cast<Index>(i)) = s_[k_set_[i]];
}

Index SimulatorEmission::num_params() const { return net_.num_weights() + static_cast<Index>(fitted_.size()); }

void SimulatorEmission::get_params(std::span<double> out) const {
    const auto nw = static_cast<std::size_t>(net_.num_weights());
    net_.pack(out.subspan(0, nw));
    for (std::size_t i = 0; i < fitted_.size(); ++i) out[nw + i] = std::log(s_[fitted_[i]]);
}

void SimulatorEmission::set_params(std::span<const double> in) {
    const auto nw = static_cast<std::size_t>(net_.num_weights());
    net_.unpack(in.subspan(0, nw));
    for (std::size_t i = 0; i < fitted_.size(); ++i) s_[fitted_[i]] = std::exp(in[nw + i]);
    for (std::size_t i = 0; i < k_set_.size(); ++i) net_.anchors(static_cast<Index>(i)) = s_[k_set_[i]];
}

bool SimulatorEmission::forward(const MatrixXd& Z, VectorXd& mean) {
    const auto T = static_cast<Index>(u_.size());
    if (Z.cols() != T) throw DimensionError("simulator emission: latent path length differs from the inputs");
    d_ = link::link_batch(Z, net_, &cache_);
    states_.resize(u_.size() + 1);
    states_[0] = x0_;
    mean.resize(T);
    physio::ParamVec<double> p = s_.values;
    physio::StepOptions opts;
    opts.substeps = substeps_;
    for (Index t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < k_set_.size(); ++i) at(p, k_set_[i]) = d_(static_cast<Index>(i), t);
        opts.meal_mass_mg = meal_mass_[static_cast<std::size_t>(t)];
        const auto& x = states_[static_cast<std::size_t>(t + 1)] =
            physio::euler_step(states_[static_cast<std::size_t>(t)], p, u_[static_cast<std::size_t>(t)],
                               data::kStepMinutes, opts);
        for (double v : x)
            if (!std::isfinite(v)) return false;
        mean(t) = at(x, Comp::Gs) / at(p, Param::V_G);
    }
    return true;
}

void SimulatorEmission::backward(const VectorXd& g_mean, MatrixXd& g_Z, std::span<double> g_params) {
    using ad::Var;
    const auto T = static_cast<Index>(u_.size());
    const auto K = static_cast<Index>(k_set_.size());
    MatrixXd g_d = MatrixXd::Zero(K, T);
    std::vector<double> g_s(fitted_.size(), 0.0);

    // Role of each parameter inside a step: dynamic index, fitted index, or -1.
    std::array<int, physio::kNumParams> dyn_idx{}, fit_idx{};
    dyn_idx.fill(-1);
    fit_idx.fill(-1);
    for (std::size_t i = 0; i < k_set_.size(); ++i) dyn_idx[static_cast<std::size_t>(k_set_[i])] = static_cast<int>(i);
    for (std::size_t i = 0; i < fitted_.size(); ++i)
        if (dyn_idx[static_cast<std::size_t>(fitted_[i])] < 0) fit_idx[static_cast<std::size_t>(fitted_[i])] = static_cast<int>(i);

    ad::Tape tape;
    tape.reserve(4096);
    std::array<double, physio::kStateDim> g_x{};
    std::vector<Var> outputs(physio::kStateDim + 1);
    std::vector<double> seeds(physio::kStateDim + 1);
    physio::StepOptions opts;
    opts.substeps = substeps_;
    for (Index t = T - 1; t >= 0; --t) {
        const auto ts = static_cast<std::size_t>(t);
        bool any = g_mean(t) != 0.0;
        for (double g : g_x) any = any || g != 0.0;
        if (!any) continue;

        tape.clear();
        physio::StateVec<Var> xv;
        for (std::size_t i = 0; i < physio::kStateDim; ++i) xv[i] = tape.variable(states_[ts][i]);
        physio::ParamVec<Var> pv;
        for (std::size_t j = 0; j < physio::kNumParams; ++j) {
            pv[j] = tape.variable(dyn_idx[j] >= 0 ? d_(dyn_idx[j], t) : s_.values[j]);
        }
        opts.meal_mass_mg = meal_mass_[ts];
        const auto xn = physio::euler_step(xv, pv, u_[ts], data::kStepMinutes, opts);
        for (std::size_t i = 0; i < physio::kStateDim; ++i) {
            outputs[i] = xn[i];
            seeds[i] = g_x[i];
        }
        outputs[physio::kStateDim] = at(xn, Comp::Gs) / at(pv, Param::V_G);
        seeds[physio::kStateDim] = g_mean(t);
        tape.backward(outputs, seeds);

        for (std::size_t i = 0; i < physio::kStateDim; ++i) g_x[i] = tape.adjoint(xv[i]);
        for (std::size_t j = 0; j < physio::kNumParams; ++j) {
            if (dyn_idx[j] >= 0) g_d(dyn_idx[j], t) = tape.adjoint(pv[j]);
            else if (fit_idx[j] >= 0) g_s[static_cast<std::size_t>(fit_idx[j])] += tape.adjoint(pv[j]);
        }
    }

    const link::LinkGrad lg = link::link_backward(g_d, cache_, net_);
    g_Z = lg.Z;
    const auto nw = static_cast<std::size_t>(net_.num_weights());
    std::vector<double> gw(nw);
    lg.pack_weights(gw);
    for (std::size_t i = 0; i < nw; ++i) g_params[i] += gw[i];
    for (std::size_t i = 0; i < k_set_.size(); ++i) {
        for (std::size_t f = 0; f < fitted_.size(); ++f)
            if (fitted_[f] == k_set_[i]) g_s[f] += lg.anchors(static_cast<Index>(i));
    }
    // Fitted entries are stored as logs.
    for (std::size_t f = 0; f < fitted_.size(); ++f) g_params[nw + f] += g_s[f] * s_[fitted_[f]];
}

// ---- objective -------------------------------------------------------------------------

ElboObjective::ElboObjective(VectorXd y, MatrixXd covariates, std::unique_ptr<Emission> emission, Index latent_dim,
                             double penalty_weight, latent::PenaltyMode mode)
    : y_(std::move(y)),
      a_(std::move(covariates)),
      emission_(std::move(emission)),
      D_(latent_dim),
      penalty_weight_(penalty_weight),
      mode_(mode) {
    if (a_.cols() != y_.size()) throw DimensionError("covariates and observations differ in length");
    if (D_ < 1) throw DimensionError("latent dimension must be at least 1");
    const Index T = y_.size(), J = a_.rows();
    auto add = [&](const char* name, Index n) {
        blocks_.push_back({name, total_, n});
        total_ += n;
    };
    add("A", D_ * D_);
    add("B", D_ * J);
    add("Q_sqrt", tri_size(D_));
    add("mu0", D_);
    add("Sigma0_sqrt", tri_size(D_));
    add("emission", emission_->num_params());
    add("log_sigma", 1);
    add("posterior", 2 * D_ + 2 * D_ * T);
}

ElboObjective::ElboObjective(const ElboObjective& o)
    : y_(o.y_),
      a_(o.a_),
      emission_(o.emission_->clone()),
      D_(o.D_),
      penalty_weight_(o.penalty_weight_),
      mode_(o.mode_),
      blocks_(o.blocks_),
      total_(o.total_) {}

const ParamBlock& ElboObjective::block(const std::string& name) const {
    for (const auto& b : blocks_)
        if (b.name == name) return b;
    throw ConfigError("unknown parameter block '" + name + "'");
}

std::vector<double> ElboObjective::pack(const latent::DynamicsParams& dyn, double sigma,
                                        const VariationalPosterior& q) const {
    dyn.check();
    q.check();
    if (dyn.dim() != D_ || dyn.input_dim() != a_.rows() || q.dim() != D_ || q.length() != y_.size()) {
        throw DimensionError("parameters do not match the objective's shapes");
    }
    if (!(sigma > 0.0)) throw ConfigError("observation noise must be positive");
    std::vector<double> x(static_cast<std::size_t>(total_));
    auto ptr = [&](const char* name) { return x.data() + block(name).offset; };
    std::copy(dyn.A.data(), dyn.A.data() + dyn.A.size(), ptr("A"));
    std::copy(dyn.B.data(), dyn.B.data() + dyn.B.size(), ptr("B"));
    pack_tri(dyn.Q_sqrt, ptr("Q_sqrt"));
    std::copy(dyn.mu0.data(), dyn.mu0.data() + D_, ptr("mu0"));
    pack_tri(dyn.Sigma0_sqrt, ptr("Sigma0_sqrt"));
    const auto& e = block("emission");
    emission_->get_params(std::span<double>(x.data() + e.offset, static_cast<std::size_t>(e.size)));
    *ptr("log_sigma") = std::log(sigma);
    double* p = ptr("posterior");
    p = std::copy(q.m0.data(), q.m0.data() + D_, p);
    p = std::copy(q.log_s0.data(), q.log_s0.data() + D_, p);
    p = std::copy(q.m.data(), q.m.data() + q.m.size(), p);
    std::copy(q.log_s.data(), q.log_s.data() + q.log_s.size(), p);
    return x;
}

void ElboObjective::unpack(std::span<const double> x, latent::DynamicsParams& dyn, double& sigma,
                           VariationalPosterior& q) {
    if (static_cast<Index>(x.size()) != total_) throw DimensionError("flat parameter vector has the wrong length");
    const Index T = y_.size(), J = a_.rows();
    auto ptr = [&](const char* name) { return x.data() + block(name).offset; };
    dyn.A = Eigen::Map<const MatrixXd>(ptr("A"), D_, D_);
    dyn.B = Eigen::Map<const MatrixXd>(ptr("B"), D_, J);
    dyn.Q_sqrt = unpack_tri(ptr("Q_sqrt"), D_);
    dyn.mu0 = Eigen::Map<const VectorXd>(ptr("mu0"), D_);
    dyn.Sigma0_sqrt = unpack_tri(ptr("Sigma0_sqrt"), D_);
    const auto& e = block("emission");
    emission_->set_params(x.subspan(static_cast<std::size_t>(e.offset), static_cast<std::size_t>(e.size)));
    sigma = std::exp(*ptr("log_sigma"));
    const double* p = ptr("posterior");
    q.m0 = Eigen::Map<const VectorXd>(p, D_);
    q.log_s0 = Eigen::Map<const VectorXd>(p + D_, D_);
    q.m = Eigen::Map<const MatrixXd>(p + 2 * D_, D_, T);
    q.log_s = Eigen::Map<const MatrixXd>(p + 2 * D_ + D_ * T, D_, T);
}

double ElboObjective::evaluate(std::span<const double> x, const std::vector<NoiseDraw>& draws, std::span<double> grad,
                               ElboParts* parts) {
    if (draws.empty()) throw ConfigError("ELBO needs at least one Monte Carlo draw");
    const bool want_grad = !grad.empty();
    if (want_grad && static_cast<Index>(grad.size()) != total_) throw DimensionError("gradient buffer has the wrong length");
    latent::DynamicsParams dyn;
    double sigma = 0.0;
    VariationalPosterior q;
    unpack(x, dyn, sigma, q);
    const Index T = y_.size();
    const double inv_m = 1.0 / static_cast<double>(draws.size());
    const double log_sigma = std::log(sigma);
    const double inv_var = 1.0 / (sigma * sigma);
    const MatrixXd s = q.s();
    const VectorXd s0 = q.s0();

    latent::DynamicsParams g_dyn;
    VariationalPosterior g_q;
    std::vector<double> g_em(static_cast<std::size_t>(emission_->num_params()), 0.0);
    double g_log_sigma = 0.0;
    if (want_grad) {
        g_dyn.A = MatrixXd::Zero(D_, D_);
        g_dyn.B = MatrixXd::Zero(D_, a_.rows());
        g_dyn.Q_sqrt = MatrixXd::Zero(D_, D_);
        g_dyn.mu0 = VectorXd::Zero(D_);
        g_dyn.Sigma0_sqrt = MatrixXd::Zero(D_, D_);
        g_q = VariationalPosterior::standard(D_, T, 1.0);
        g_q.log_s0.setZero();
        g_q.log_s.setZero();
    }

    ElboParts local;
    VectorXd mean;
    MatrixXd g_Z;
    for (const NoiseDraw& draw : draws) {
        const EpsSample eps = apply_noise(q, draw);
        const VectorXd z0 = dyn.mu0 + dyn.Sigma0_sqrt.triangularView<Eigen::Lower>() * eps.eps0;
        const MatrixXd Z = latent::unroll(z0, a_, eps.eps, dyn);
        if (!emission_->forward(Z, mean)) {
            local.diverged = true;
            break;
        }
        VectorXd g_mean = VectorXd::Zero(T);
        double ll = 0.0;
        for (Index t = 0; t < T; ++t) {
            if (!(y_(t) == y_(t))) continue;
            const double r = y_(t) - mean(t);
            ll += -kHalfLog2Pi - log_sigma - 0.5 * r * r * inv_var;
            g_mean(t) = inv_m * r * inv_var;
            g_log_sigma += inv_m * (r * r * inv_var - 1.0);
        }
        if (!std::isfinite(ll)) {
            local.diverged = true;
            break;
        }
        local.loglik += inv_m * ll;
        if (!want_grad) continue;

        emission_->backward(g_mean, g_Z, g_em);
        const latent::UnrollGrad ug = latent::unroll_backward(g_Z, z0, Z, a_, eps.eps, dyn);
        g_dyn.A += ug.A;
        g_dyn.B += ug.B;
        g_dyn.Q_sqrt += ug.Q_sqrt;
        g_dyn.mu0 += ug.z0;
        g_dyn.Sigma0_sqrt += (ug.z0 * eps.eps0.transpose()).triangularView<Eigen::Lower>().toDenseMatrix();
        const VectorXd g_eps0 = dyn.Sigma0_sqrt.triangularView<Eigen::Lower>().transpose() * ug.z0;
        g_q.m0 += g_eps0;
        g_q.log_s0 += g_eps0.cwiseProduct(draw.eta0).cwiseProduct(q.log_s0.unaryExpr(&floored_exp_slope));
        g_q.m += ug.eps;
        g_q.log_s += ug.eps.cwiseProduct(draw.eta).cwiseProduct(q.log_s.unaryExpr(&floored_exp_slope));
    }

    if (local.diverged) {
        if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
        local.elbo = -kDivergedLoss;
        if (parts != nullptr) *parts = local;
        return kDivergedLoss;
    }

    local.kl = kl_term(q);
    local.penalty = latent::stability_penalty(dyn.A, penalty_weight_, mode_);
    local.elbo = local.loglik - local.kl - local.penalty;
    if (parts != nullptr) *parts = local;

    if (want_grad) {
        // KL(q || N(0, I)) per coordinate: d/dm = m, d/dlog s = s^2 - 1.
        g_q.m0 -= q.m0;
        g_q.log_s0 -= (s0.array().square() - 1.0).matrix().cwiseProduct(
            q.log_s0.unaryExpr(&floored_exp_slope).cwiseQuotient(s0));
        g_q.m -= q.m;
        g_q.log_s -= (s.array().square() - 1.0).matrix().cwiseProduct(
            q.log_s.unaryExpr(&floored_exp_slope).cwiseQuotient(s));
        g_dyn.A -= latent::stability_penalty_grad(dyn.A, penalty_weight_, mode_);

        auto out = [&](const char* name) { return grad.data() + block(name).offset; };
        std::copy(g_dyn.A.data(), g_dyn.A.data() + g_dyn.A.size(), out("A"));
        std::copy(g_dyn.B.data(), g_dyn.B.data() + g_dyn.B.size(), out("B"));
        pack_tri_grad(g_dyn.Q_sqrt, dyn.Q_sqrt, out("Q_sqrt"));
        std::copy(g_dyn.mu0.data(), g_dyn.mu0.data() + D_, out("mu0"));
        pack_tri_grad(g_dyn.Sigma0_sqrt, dyn.Sigma0_sqrt, out("Sigma0_sqrt"));
        std::copy(g_em.begin(), g_em.end(), out("emission"));
        *out("log_sigma") = g_log_sigma;
        double* p = out("posterior");
        p = std::copy(g_q.m0.data(), g_q.m0.data() + D_, p);
        p = std::copy(g_q.log_s0.data(), g_q.log_s0.data() + D_, p);
        p = std::copy(g_q.m.data(), g_q.m.data() + g_q.m.size(), p);
        std::copy(g_q.log_s.data(), g_q.log_s.data() + g_q.log_s.size(), p);
        // The optimiser minimises the negative ELBO.
        for (double& g : grad) g = -g;
    }
    return -local.elbo;
}

// ---- optimiser -------------------------------------------------------------------------

bool adam_step(std::span<double> params, std::span<const double> grads, AdamState& st, double lr,
               std::span<const std::uint8_t> trainable) {
    const auto n = static_cast<Index>(params.size());
    if (static_cast<Index>(grads.size()) != n || (!trainable.empty() && static_cast<Index>(trainable.size()) != n)) {
        throw DimensionError("adam_step: parameter, gradient and mask lengths differ");
    }
    if (st.m.size() != n) {
        st.m = VectorXd::Zero(n);
        st.v = VectorXd::Zero(n);
    }
    for (Index i = 0; i < n; ++i) {
        const bool active = trainable.empty() || trainable[static_cast<std::size_t>(i)] != 0;
        if (active && !std::isfinite(grads[static_cast<std::size_t>(i)])) {
            ++st.skipped;
            return false;
        }
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++st.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (!trainable.empty() && trainable[k] == 0) continue;
        const double g = grads[k];
        st.m(i) = b1 * st.m(i) + (1.0 - b1) * g;
        st.v(i) = b2 * st.v(i) + (1.0 - b2) * g * g;
        params[k] -= lr * (st.m(i) / c1) / (std::sqrt(st.v(i) / c2) + eps);
    }
    return true;
}

void FitConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (mc_samples < 1) throw ConfigError("mc_samples must be at least 1");
    if (penalty_weight < 0.0) throw ConfigError("penalty_weight must be non-negative");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (max_iterations < 0) throw ConfigError("max_iterations must be non-negative");
    if (latent_dim < 1) throw ConfigError("latent_dim must be at least 1");
    if (k_set.empty()) throw ConfigError("k_set must name at least one dynamic parameter");
    if (!(init_sigma > 0.0) || !(init_posterior_sd > 0.0) || !(init_q > 0.0)) {
        throw ConfigError("initial noise scales must be positive");
    }
    if (substeps < 1) throw ConfigError("substeps must be at least 1");
}

nlohmann::json FitConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"mc_samples", mc_samples},
            {"penalty_weight", penalty_weight},
            {"penalty_mode", penalty_mode == latent::PenaltyMode::Absolute ? "absolute" : "signed"},
            {"patience", patience},
            {"max_iterations", max_iterations},
            {"seed", seed},
            {"latent_dim", latent_dim},
            {"k_set", physio::param_list_to_json(k_set)},
            {"fitted_static", physio::param_list_to_json(fitted_static)},
            {"frozen", frozen},
            {"fit_sigma", fit_sigma},
            {"init_sigma", init_sigma},
            {"init_posterior_sd", init_posterior_sd},
            {"init_a_diag", init_a_diag},
            {"init_q", init_q},
            {"substeps", substeps}};
}

FitConfig FitConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "learning_rate", "mc_samples", "penalty_weight", "penalty_mode", "patience",          "max_iterations",
        "seed",          "latent_dim", "k_set",          "fitted_static", "frozen",           "fit_sigma",
        "init_sigma",    "init_posterior_sd", "init_a_diag", "init_q",    "substeps"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown fit option '" + key + "'");
    FitConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.penalty_weight = j.value("penalty_weight", c.penalty_weight);
    if (j.contains("penalty_mode")) {
        const auto m = j.at("penalty_mode").get<std::string>();
        if (m == "absolute") c.penalty_mode = latent::PenaltyMode::Absolute;
        else if (m == "signed") c.penalty_mode = latent::PenaltyMode::Signed;
        else throw ConfigError("penalty_mode must be 'absolute' or 'signed'");
    }
    c.patience = j.value("patience", c.patience);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.seed = j.value("seed", c.seed);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    if (j.contains("k_set")) c.k_set = physio::param_list_from_json(j.at("k_set"));
    if (j.contains("fitted_static")) c.fitted_static = physio::param_list_from_json(j.at("fitted_static"));
    c.frozen = j.value("frozen", c.frozen);
    c.fit_sigma = j.value("fit_sigma", c.fit_sigma);
    c.init_sigma = j.value("init_sigma", c.init_sigma);
    c.init_posterior_sd = j.value("init_posterior_sd", c.init_posterior_sd);
    c.init_a_diag = j.value("init_a_diag", c.init_a_diag);
    c.init_q = j.value("init_q", c.init_q);
    c.substeps = j.value("substeps", c.substeps);
    c.validate();
    return c;
}

nlohmann::json FitTrace::to_json() const {
    return {{"loss", loss},         {"best", best},           {"rho", rho},
            {"skipped", skipped},   {"diverged", diverged},   {"iterations", iterations},
            {"best_iteration", best_iteration}, {"stop_reason", stop_reason}};
}

FitTrace FitTrace::from_json(const nlohmann::json& j) {
    FitTrace t;
    t.loss = j.at("loss").get<std::vector<double>>();
    t.best = j.at("best").get<std::vector<double>>();
    t.rho = j.at("rho").get<std::vector<double>>();
    t.skipped = j.at("skipped").get<long>();
    t.diverged = j.at("diverged").get<long>();
    t.iterations = j.at("iterations").get<int>();
    t.best_iteration = j.at("best_iteration").get<int>();
    t.stop_reason = j.at("stop_reason").get<std::string>();
    return t;
}

OptimizeResult optimize(ElboObjective& obj, std::vector<double> x, const FitConfig& cfg,
                        const std::function<void(int, double)>& on_iteration) {
    cfg.validate();
    const auto n = static_cast<std::size_t>(obj.size());
    if (x.size() != n) throw DimensionError("optimize: initial vector has the wrong length");
    std::vector<std::uint8_t> mask(n, 1);
    auto freeze = [&](const std::string& name) {
        const auto& b = obj.block(name);
        std::fill(mask.begin() + b.offset, mask.begin() + b.offset + b.size, 0);
    };
    for (const auto& name : cfg.frozen) freeze(name);
    if (!cfg.fit_sigma) freeze("log_sigma");
    const auto& ablock = obj.block("A");
    const bool project = mask[static_cast<std::size_t>(ablock.offset)] != 0;
    const Index D = obj.latent_dim();

    auto project_a = [&](std::vector<double>& v) {
        Eigen::Map<MatrixXd> A(v.data() + ablock.offset, D, D);
        if (project) A = latent::spectral_project(MatrixXd(A));
        return latent::spectral_radius(MatrixXd(A));
    };
    project_a(x);

    Rng rng(cfg.seed, 0x5eed);
    AdamState st;
    std::vector<double> grad(n);
    OptimizeResult res;
    res.best = x;
    double best_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;
    res.trace.stop_reason = "max_iterations";
    for (int it = 0; it < cfg.max_iterations; ++it) {
        std::vector<NoiseDraw> draws;
        draws.reserve(static_cast<std::size_t>(cfg.mc_samples));
        for (int k = 0; k < cfg.mc_samples; ++k) draws.push_back(draw_noise(D, obj.length(), rng));
        ElboParts parts;
        const double loss = obj.evaluate(x, draws, grad, &parts);
        res.trace.loss.push_back(loss);
        if (!parts.diverged && loss < best_loss) {
            best_loss = loss;
            res.best = x;
            res.trace.best_iteration = it;
            since_best = 0;
        } else {
            ++since_best;
        }
        res.trace.best.push_back(best_loss);
        res.trace.iterations = it + 1;
        if (on_iteration) on_iteration(it, loss);

        if (parts.diverged) {
            ++res.trace.diverged;
            ++res.trace.skipped;
        } else if (!adam_step(x, grad, st, cfg.learning_rate, mask)) {
            ++res.trace.skipped;
        }
        res.trace.rho.push_back(project_a(x));

        if (it + 1 >= 20 && static_cast<double>(res.trace.skipped) > 0.1 * (it + 1)) {
            throw FitError(fmt::format("fit aborted: {} of {} steps skipped ({} diverged rollouts)", res.trace.skipped,
                                       it + 1, res.trace.diverged));
        }
        if (since_best >= cfg.patience) {
            res.trace.stop_reason = "patience";
            break;
        }
    }
    return res;
}

// ---- DTD-Sim model ---------------------------------------------------------------------

nlohmann::json ModelParams::to_json() const {
    return {{"dynamics", dyn.to_json()}, {"link", net.to_json()},          {"static", s.to_json()},
            {"k_set", physio::param_list_to_json(k_set)}, {"fitted_static", physio::param_list_to_json(fitted_static)}, {"sigma", sigma}};
}

ModelParams ModelParams::from_json(const nlohmann::json& j) {
    ModelParams m;
    m.dyn = latent::DynamicsParams::from_json(j.at("dynamics"));
    m.net = link::LinkNetwork::from_json(j.at("link"));
    m.s = physio::StaticParams::from_json(j.at("static"));
    m.k_set = physio::param_list_from_json(j.at("k_set"));
    m.fitted_static = physio::param_list_from_json(j.at("fitted_static"));
    m.sigma = j.at("sigma").get<double>();
    if (m.net.input_dim() != m.dyn.dim() || m.net.output_dim() != static_cast<Index>(m.k_set.size())) {
        throw ConfigError("checkpoint link network does not match the latent dimension or dynamic set");
    }
    return m;
}

latent::CovariateScaling covariate_scaling(const data::GriddedSeries& series) {
    latent::CovariateScaling sc;
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (double e : series.energy) {
        if (!std::isfinite(e)) continue;
        sum += e;
        sq += e * e;
        ++n;
    }
    if (n > 0) {
        sc.energy_mean = sum / static_cast<double>(n);
        const double var = sq / static_cast<double>(n) - sc.energy_mean * sc.energy_mean;
        sc.energy_sd = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return sc;
}

MatrixXd covariates_for(const data::GriddedSeries& series, const latent::CovariateScaling& scaling) {
    const auto mod = series.minutes_of_day();
    return latent::build_covariates(mod, series.energy, scaling);
}

physio::PhysioState initial_state(const physio::StaticParams& s, double basal_u_per_min,
                                  const data::GriddedSeries& series) {
    for (std::size_t t = 0; t < series.size(); ++t)
        if (!series.missing(t)) return physio::quasi_steady_state(s, basal_u_per_min, series.cgm[t]);
    throw DataError("series has no observed glucose");
}

WindowStart replay_to(const physio::StaticParams& s, double basal_u_per_min, const data::GriddedSeries& series,
                      std::size_t window_start, int burn_in) {
    if (window_start >= series.size()) throw DataError("window start lies outside the series");
    const std::size_t from = window_start - std::min<std::size_t>(static_cast<std::size_t>(std::max(burn_in, 0)), window_start);
    std::size_t first_obs = from;
    while (first_obs < series.size() && series.missing(first_obs)) ++first_obs;
    if (first_obs == series.size()) throw DataError("no observed glucose at or after the replay start");
    physio::Simulator sim(physio::quasi_steady_state(s, basal_u_per_min, series.cgm[first_obs]));
    for (std::size_t t = from; t < window_start; ++t) sim.step(s.values, series.input(t));
    double g_ref = series.cgm[first_obs];
    for (std::size_t t = window_start; t-- > from;) {
        if (!series.missing(t)) {
            g_ref = series.cgm[t];
            break;
        }
    }
    return {physio::with_glucose(sim.state(), s, g_ref), sim.meal_mass_mg()};
}

ModelParams init_model(const physio::StaticParams& s, const FitConfig& cfg, Index covariate_dim) {
    ModelParams m;
    m.dyn = latent::DynamicsParams::isotropic(cfg.latent_dim, covariate_dim, cfg.init_a_diag, cfg.init_q);
    VectorXd anchors(static_cast<Index>(cfg.k_set.size()));
    for (std::size_t i = 0; i < cfg.k_set.size(); ++i) anchors(static_cast<Index>(i)) = s[cfg.k_set[i]];
    m.net = link::init_link(cfg.latent_dim, anchors.size(), cfg.seed, anchors);
    m.s = s;
    m.k_set = cfg.k_set;
    m.fitted_static = cfg.fitted_static;
    m.sigma = cfg.init_sigma;
    return m;
}

ElboObjective make_objective(const ModelParams& m, const SeriesContext& ctx, const FitConfig& cfg) {
    auto em = std::make_unique<SimulatorEmission>(m.net, m.s, m.k_set, m.fitted_static, ctx.x0, ctx.inputs,
                                                  ctx.initial_meal_mass_mg, cfg.substeps);
    return ElboObjective(ctx.y, ctx.covariates, std::move(em), m.dyn.dim(), cfg.penalty_weight, cfg.penalty_mode);
}

void unpack_model(ElboObjective& obj, std::span<const double> x, ModelParams& m, VariationalPosterior& q) {
    obj.unpack(x, m.dyn, m.sigma, q);
    const auto* em = dynamic_cast<const SimulatorEmission*>(&obj.emission());
    if (em == nullptr) throw ConfigError("unpack_model needs a simulator emission");
    m.net = em->net();
    m.s = em->static_params();
}

namespace {

SeriesContext context_for(const data::GriddedSeries& series, const latent::CovariateScaling& scaling,
                          const physio::PhysioState& x0) {
    SeriesContext ctx;
    ctx.y = Eigen::Map<const VectorXd>(series.cgm.data(), static_cast<Index>(series.size()));
    ctx.covariates = covariates_for(series, scaling);
    ctx.inputs = series.inputs();
    ctx.x0 = x0;
    return ctx;
}

}  // namespace

Fitted fit(const data::GriddedSeries& train, const FitConfig& cfg, const physio::StaticParams& s_init,
           const std::function<void(int, double)>& on_iteration) {
    cfg.validate();
    train.check();
    if (train.size() == 0) throw DataError("training split is empty");
    Fitted f;
    f.config = cfg;
    f.fingerprint = data::fingerprint(train);
    f.basal_u_per_min = data::estimate_basal_rate(train);
    f.x0 = initial_state(s_init, f.basal_u_per_min, train);
    f.scaling = covariate_scaling(train);
    const SeriesContext ctx = context_for(train, f.scaling, f.x0);

    f.model = init_model(s_init, cfg, ctx.covariates.rows());
    f.posterior = VariationalPosterior::standard(cfg.latent_dim, static_cast<Index>(train.size()), cfg.init_posterior_sd);
    ElboObjective obj = make_objective(f.model, ctx, cfg);
    auto res = optimize(obj, obj.pack(f.model.dyn, f.model.sigma, f.posterior), cfg, on_iteration);
    unpack_model(obj, res.best, f.model, f.posterior);
    f.trace = std::move(res.trace);
    return f;
}

PosteriorMeanPath posterior_mean_path(const Fitted& f, const data::GriddedSeries& train) {
    const SeriesContext ctx = context_for(train, f.scaling, f.x0);
    if (static_cast<Index>(train.size()) != f.posterior.length()) {
        throw DimensionError("series length differs from the fitted posterior");
    }
    PosteriorMeanPath out;
    const VectorXd z0 = f.model.dyn.mu0 + f.model.dyn.Sigma0_sqrt.triangularView<Eigen::Lower>() * f.posterior.m0;
    out.z = latent::unroll(z0, ctx.covariates, f.posterior.m, f.model.dyn);
    SimulatorEmission em(f.model.net, f.model.s, f.model.k_set, f.model.fitted_static, ctx.x0, ctx.inputs, 0.0,
                         f.config.substeps);
    if (!em.forward(out.z, out.cgm)) throw DivergenceError("posterior mean rollout diverged");
    out.d = em.last_dynamic();
    return out;
}

nlohmann::json checkpoint_to_json(const Fitted& f) {
    nlohmann::json x0 = nlohmann::json::array();
    for (double v : f.x0) x0.push_back(v);
    return {{"format", "dtdsim-checkpoint"},
            {"format_version", 1},
            {"model", f.model.to_json()},
            {"posterior", f.posterior.to_json()},
            {"config", f.config.to_json()},
            {"trace", f.trace.to_json()},
            {"covariate_scaling", {{"energy_mean", f.scaling.energy_mean}, {"energy_sd", f.scaling.energy_sd}}},
            {"basal_u_per_min", f.basal_u_per_min},
            {"x0", x0},
            {"fingerprint", f.fingerprint}};
}

Fitted checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != "dtdsim-checkpoint") throw ConfigError("not a model checkpoint");
    Fitted f;
    f.model = ModelParams::from_json(j.at("model"));
    f.posterior = VariationalPosterior::from_json(j.at("posterior"));
    f.config = FitConfig::from_json(j.at("config"));
    f.trace = FitTrace::from_json(j.at("trace"));
    f.scaling.energy_mean = j.at("covariate_scaling").at("energy_mean").get<double>();
    f.scaling.energy_sd = j.at("covariate_scaling").at("energy_sd").get<double>();
    f.basal_u_per_min = j.at("basal_u_per_min").get<double>();
    const auto x0 = j.at("x0").get<std::vector<double>>();
    if (x0.size() != physio::kStateDim) throw ConfigError("checkpoint initial state has the wrong size");
    std::copy(x0.begin(), x0.end(), f.x0.begin());
    f.fingerprint = j.at("fingerprint");
    if (f.posterior.dim() != f.model.dyn.dim()) throw ConfigError("checkpoint posterior does not match the model");
    return f;
}

void save_checkpoint(const std::string& path, const Fitted& f) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out << checkpoint_to_json(f).dump(1) << '\n';
}

Fitted load_checkpoint(const std::string& path, const data::GriddedSeries* expected) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
    }
    Fitted f = checkpoint_from_json(j);
    if (expected != nullptr) {
        const auto fp = data::fingerprint(*expected);
        if (fp != f.fingerprint) {
            throw FingerprintError("checkpoint was fitted on different data (expected " + f.fingerprint.dump() +
                                   ", got " + fp.dump() + ")");
        }
    }
    return f;
}

}  // namespace dtdsim::infer
