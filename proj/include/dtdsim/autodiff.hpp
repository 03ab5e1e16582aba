#pragma once

// Scalar reverse-mode differentiation.
//
// A Tape is a Wengert list: every primitive appends one node holding up to
// two parent indices and the local partial derivatives with respect to them.
// The reverse sweep walks the list backwards exactly once. Dense layers that
// would be wasteful at scalar granularity (the link network, the latent
// unroll) carry their own vector-Jacobian products and are chained with
// tape adjoints by the caller.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dtdsim::ad {

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Softplus,
    Abs,
    Relu,
    Clamp,
    Unary,
    Opaque,
};

std::string_view op_name(Op op) noexcept;

class Tape;

/// Handle to a tape node. Carries its value so forward code never touches
/// the tape for reads.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;
    double val = 0.0;

    double value() const noexcept { return val; }
};

class Tape {
public:
    static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var variable(double value);
    /// Leaf that callers do not intend to read an adjoint from. Identical to
    /// `variable` on the tape; kept separate for readability at call sites.
    Var constant(double value) { return variable(value); }

    /// Value computed outside the engine with no registered derivative. The
    /// reverse sweep raises UnsupportedPrimitiveError if adjoint reaches it.
    Var opaque(std::string_view name, double value, std::span<const Var> inputs);

    Var record(Op op, double value, std::uint32_t a, double da,
               std::uint32_t b = kNone, double db = 0.0);

    std::size_t size() const noexcept { return nodes_.size(); }
    void clear();
    void reserve(std::size_t n) { nodes_.reserve(n); }

    /// Reverse sweep from a single output seeded with `seed`.
    void backward(Var output, double seed = 1.0);
    /// Reverse sweep with several seeded outputs (vector-Jacobian product).
    void backward(std::span<const Var> outputs, std::span<const double> seeds);

    double adjoint(Var v) const { return adjoints_.at(v.id); }
    double adjoint(std::uint32_t id) const { return adjoints_.at(id); }

private:
    struct Node {
        std::uint32_t a;
        std::uint32_t b;
        double da;
        double db;
        Op op;
    };

    void sweep();

    std::vector<Node> nodes_;
    std::vector<double> adjoints_;
    std::vector<std::string> opaque_names_;
    std::vector<std::uint32_t> opaque_nodes_;
};

// ---- arithmetic ------------------------------------------------------------

Var operator+(Var x, Var y);
Var operator-(Var x, Var y);
Var operator*(Var x, Var y);
Var operator/(Var x, Var y);
Var operator-(Var x);

Var operator+(Var x, double c);
Var operator+(double c, Var x);
Var operator-(Var x, double c);
Var operator-(double c, Var x);
Var operator*(Var x, double c);
Var operator*(double c, Var x);
Var operator/(Var x, double c);
Var operator/(double c, Var x);

inline Var& operator+=(Var& x, Var y) { return x = x + y; }
inline Var& operator-=(Var& x, Var y) { return x = x - y; }
inline Var& operator*=(Var& x, Var y) { return x = x * y; }
inline Var& operator+=(Var& x, double c) { return x = x + c; }
inline Var& operator*=(Var& x, double c) { return x = x * c; }

Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var tanh(Var x);
Var abs(Var x);
/// ln(1 + e^x), numerically stable.
Var softplus(Var x);
/// max(x, 0) with subgradient 0 at x = 0.
Var relu(Var x);
/// max(x, 0) with subgradient 1 at x = 0 (projection onto the feasible set).
Var clamp_nonneg(Var x);
/// Elementwise function with caller-supplied value and slope.
Var unary(Var x, double value, double slope);

// Scalar twins so templated model code compiles for double as well.
inline double softplus(double x) {
    return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double clamp_nonneg(double x) { return x >= 0.0 ? x : 0.0; }
inline double unary(double, double value, double) { return value; }

inline double value_of(double x) { return x; }
inline double value_of(Var x) { return x.val; }

// ---- drivers -----------------------------------------------------------------

using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradientResult {
    double value = 0.0;
    std::vector<double> gradient;
};

/// Records `loss` on a fresh tape with one leaf per parameter and returns
/// d loss / d params.
GradientResult gradient(const LossFn& loss, std::span<const double> params);

struct FiniteDiffOptions {
    double h = 1e-5;
    /// Gradients smaller than floor_scale * (1 + |f|) are compared in absolute
    /// terms; below that central differences are dominated by rounding.
    double floor_scale = 1e-6;
    /// Relative error tolerance used to decide whether a slope jump inside
    /// the stencil is large enough to call the coordinate kink-adjacent.
    double tolerance = 1e-4;
};

struct CoordinateCheck {
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
    bool kink_adjacent = false;
};

struct FiniteDiffReport {
    double value = 0.0;
    std::vector<CoordinateCheck> coords;
    double max_rel_error = 0.0;       // over non-kink coordinates
    std::size_t worst_index = 0;
    std::size_t kink_count = 0;
};

using ValueFn = std::function<double(std::span<const double>)>;

/// Central-difference check of an analytic gradient. Coordinates where the
/// five-point stencil shows a slope discontinuity are flagged and excluded
/// from `max_rel_error`.
FiniteDiffReport finite_diff_check(const ValueFn& f, std::span<const double> params,
                                   std::span<const double> analytic,
                                   const FiniteDiffOptions& opts = {});

/// Same, with the analytic side computed by `gradient(loss, params)`.
FiniteDiffReport finite_diff_check(const LossFn& loss, std::span<const double> params,
                                   const FiniteDiffOptions& opts = {});

}  // namespace dtdsim::ad
