#include "dtdsim/autodiff.hpp"

#include <algorithm>
#include <cassert>

#include "dtdsim/errors.hpp"

namespace dtdsim::ad {

std::string_view op_name(Op op) noexcept {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Neg: return "neg";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Tanh: return "tanh";
        case Op::Softplus: return "softplus";
        case Op::Abs: return "abs";
        case Op::Relu: return "relu";
        case Op::Clamp: return "clamp";
        case Op::Unary: return "unary";
        case Op::Opaque: return "opaque";
    }
    return "unknown";
}

Var Tape::variable(double value) { return record(Op::Leaf, value, kNone, 0.0); }

Var Tape::record(Op op, double value, std::uint32_t a, double da, std::uint32_t b, double db) {
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(Node{a, b, da, db, op});
    return Var{this, id, value};
}

Var Tape::opaque(std::string_view name, double value, std::span<const Var> inputs) {
    // Parents are kept only so the error can be raised when adjoint arrives.
    const std::uint32_t a = inputs.empty() ? kNone : inputs[0].id;
    Var v = record(Op::Opaque, value, a, 0.0);
    opaque_nodes_.push_back(v.id);
    opaque_names_.emplace_back(name);
    return v;
}

void Tape::clear() {
    nodes_.clear();
    adjoints_.clear();
    opaque_names_.clear();
    opaque_nodes_.clear();
}

void Tape::backward(Var output, double seed) {
    adjoints_.assign(nodes_.size(), 0.0);
    adjoints_.at(output.id) += seed;
    sweep();
}

void Tape::backward(std::span<const Var> outputs, std::span<const double> seeds) {
    if (outputs.size() != seeds.size()) {
        throw DimensionError("Tape::backward: outputs and seeds differ in length");
    }
    adjoints_.assign(nodes_.size(), 0.0);
    for (std::size_t i = 0; i < outputs.size(); ++i) adjoints_.at(outputs[i].id) += seeds[i];
    sweep();
}

void Tape::sweep() {
    double* adj = adjoints_.data();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        const double g = adj[i];
        if (g == 0.0) continue;
        const Node& n = nodes_[i];
        if (n.op == Op::Opaque) {
            auto it = std::find(opaque_nodes_.begin(), opaque_nodes_.end(), static_cast<std::uint32_t>(i));
            const std::string& name = opaque_names_[static_cast<std::size_t>(it - opaque_nodes_.begin())];
            throw UnsupportedPrimitiveError("no derivative registered for primitive '" + name + "'");
        }
        if (n.a != kNone) adj[n.a] += n.da * g;
        if (n.b != kNone) adj[n.b] += n.db * g;
    }
}

namespace {

inline Tape* tape_of(Var x, [[maybe_unused]] Var y) {
    assert(x.tape == y.tape);
    return x.tape;
}

}  // namespace

Var operator+(Var x, Var y) { return tape_of(x, y)->record(Op::Add, x.val + y.val, x.id, 1.0, y.id, 1.0); }
Var operator-(Var x, Var y) { return tape_of(x, y)->record(Op::Sub, x.val - y.val, x.id, 1.0, y.id, -1.0); }
Var operator*(Var x, Var y) { return tape_of(x, y)->record(Op::Mul, x.val * y.val, x.id, y.val, y.id, x.val); }
Var operator/(Var x, Var y) {
    const double q = x.val / y.val;
    return tape_of(x, y)->record(Op::Div, q, x.id, 1.0 / y.val, y.id, -q / y.val);
}
Var operator-(Var x) { return x.tape->record(Op::Neg, -x.val, x.id, -1.0); }

Var operator+(Var x, double c) { return x.tape->record(Op::Add, x.val + c, x.id, 1.0); }
Var operator+(double c, Var x) { return x + c; }
Var operator-(Var x, double c) { return x.tape->record(Op::Sub, x.val - c, x.id, 1.0); }
Var operator-(double c, Var x) { return x.tape->record(Op::Sub, c - x.val, x.id, -1.0); }
Var operator*(Var x, double c) { return x.tape->record(Op::Mul, x.val * c, x.id, c); }
Var operator*(double c, Var x) { return x * c; }
Var operator/(Var x, double c) { return x.tape->record(Op::Div, x.val / c, x.id, 1.0 / c); }
Var operator/(double c, Var x) {
    const double q = c / x.val;
    return x.tape->record(Op::Div, q, x.id, -q / x.val);
}

Var exp(Var x) {
    const double e = std::exp(x.val);
    return x.tape->record(Op::Exp, e, x.id, e);
}
Var log(Var x) { return x.tape->record(Op::Log, std::log(x.val), x.id, 1.0 / x.val); }
Var sqrt(Var x) {
    const double r = std::sqrt(x.val);
    return x.tape->record(Op::Sqrt, r, x.id, 0.5 / r);
}
Var tanh(Var x) {
    const double t = std::tanh(x.val);
    return x.tape->record(Op::Tanh, t, x.id, 1.0 - t * t);
}
Var abs(Var x) {
    const double s = x.val > 0.0 ? 1.0 : (x.val < 0.0 ? -1.0 : 0.0);
    return x.tape->record(Op::Abs, std::fabs(x.val), x.id, s);
}
Var softplus(Var x) {
    const double sig = 1.0 / (1.0 + std::exp(-x.val));
    return x.tape->record(Op::Softplus, softplus(x.val), x.id, sig);
}
Var relu(Var x) {
    return x.tape->record(Op::Relu, x.val > 0.0 ? x.val : 0.0, x.id, x.val > 0.0 ? 1.0 : 0.0);
}
Var clamp_nonneg(Var x) {
    return x.tape->record(Op::Clamp, x.val >= 0.0 ? x.val : 0.0, x.id, x.val >= 0.0 ? 1.0 : 0.0);
}
Var unary(Var x, double value, double slope) { return x.tape->record(Op::Unary, value, x.id, slope); }

GradientResult gradient(const LossFn& loss, std::span<const double> params) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (double p : params) leaves.push_back(tape.variable(p));
    Var out = loss(tape, leaves);
    tape.backward(out);
    GradientResult r;
    r.value = out.val;
    r.gradient.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) r.gradient[i] = tape.adjoint(leaves[i]);
    return r;
}

FiniteDiffReport finite_diff_check(const ValueFn& f, std::span<const double> params,
                                   std::span<const double> analytic, const FiniteDiffOptions& opts) {
    if (params.size() != analytic.size()) {
        throw DimensionError("finite_diff_check: gradient length differs from parameter length");
    }
    FiniteDiffReport rep;
    std::vector<double> x(params.begin(), params.end());
    rep.value = f(x);
    const double floor = opts.floor_scale * (1.0 + std::fabs(rep.value));
    const double h = opts.h;
    rep.coords.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        auto at = [&](double step) {
            x[i] = x0 + step;
            const double v = f(x);
            x[i] = x0;
            return v;
        };
        const double fp1 = at(h), fm1 = at(-h), fp2 = at(2 * h), fm2 = at(-2 * h);
        CoordinateCheck& c = rep.coords[i];
        c.analytic = analytic[i];
        c.numeric = (fp1 - fm1) / (2 * h);
        const double scale = std::max({std::fabs(c.analytic), std::fabs(c.numeric), floor});
        c.rel_error = std::fabs(c.analytic - c.numeric) / scale;

        // For a smooth function the second differences scale as h and 2h
        // exactly up to O(h^3); a slope jump inside the stencil breaks that.
        const double d2_h = (fp1 - 2 * rep.value + fm1) / h;
        const double d2_2h = (fp2 - 2 * rep.value + fm2) / (2 * h);
        const double asym = std::fabs(d2_2h - 2 * d2_h);
        const double noise = 8.0 * 2.3e-16 * (1.0 + std::fabs(rep.value)) / h;
        c.kink_adjacent = asym > 0.1 * opts.tolerance * scale + 16.0 * noise;

        if (c.kink_adjacent) {
            ++rep.kink_count;
        } else if (c.rel_error > rep.max_rel_error) {
            rep.max_rel_error = c.rel_error;
            rep.worst_index = i;
        }
    }
    return rep;
}

FiniteDiffReport finite_diff_check(const LossFn& loss, std::span<const double> params,
                                   const FiniteDiffOptions& opts) {
    const GradientResult g = gradient(loss, params);
    ValueFn f = [&loss](std::span<const double> p) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(p.size());
        for (double v : p) leaves.push_back(tape.variable(v));
        return loss(tape, leaves).val;
    };
    return finite_diff_check(f, params, g.gradient, opts);
}

}  // namespace dtdsim::ad
