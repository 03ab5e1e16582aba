#include "dtdsim/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "dtdsim/errors.hpp"
#include "dtdsim/json_keys.hpp"
#include "dtdsim/rng.hpp"

namespace dtdsim::eval {

namespace {

bool usable(double p, double t) { return std::isfinite(p) && std::isfinite(t); }

void check_lengths(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError(fmt::format("metric inputs differ in length: {} vs {}", a.size(), b.size()));
}

std::string opt_field(const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string(); }

/// Accumulates one (horizon, context) cell.
struct Cell {
    std::size_t n = 0;
    double abs_sum = 0.0, sq_sum = 0.0, scaled_sum = 0.0;
    bool scaled_ok = true;
    double corr_sum = 0.0;
    std::size_t corr_n = 0;
};

}  // namespace

double mae(std::span<const double> pred, std::span<const double> truth) {
    check_lengths(pred, truth);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!usable(pred[i], truth[i])) continue;
        s += std::abs(pred[i] - truth[i]);
        ++n;
    }
    if (n == 0) throw UndefinedMetricError("MAE over zero comparable pairs");
    return s / static_cast<double>(n);
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
    check_lengths(pred, truth);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!usable(pred[i], truth[i])) continue;
        s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        ++n;
    }
    if (n == 0) throw UndefinedMetricError("RMSE over zero comparable pairs");
    return std::sqrt(s / static_cast<double>(n));
}

double naive_scale(std::span<const double> y, int h) {
    if (h < 1) throw UndefinedMetricError("naive scale needs h >= 1");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t t = static_cast<std::size_t>(h); t < y.size(); ++t) {
        const double a = y[t], b = y[t - static_cast<std::size_t>(h)];
        if (!usable(a, b)) continue;
        s += std::abs(a - b);
        ++n;
    }
    if (n == 0) throw UndefinedMetricError(fmt::format("no pairs {} steps apart for the naive scale", h));
    if (s == 0.0) throw UndefinedMetricError("constant series: naive scale is zero");
    return s / static_cast<double>(n);
}

double mase(std::span<const double> pred, std::span<const double> truth, double scale) {
    if (!(scale > 0.0)) throw UndefinedMetricError("MASE needs a positive naive scale");
    return mae(pred, truth) / scale;
}

std::optional<double> forecast_correlation(std::span<const double> pred, std::span<const double> truth) {
    check_lengths(pred, truth);
    double sp = 0.0, st = 0.0;
    std::size_t n = 0;
    bool pred_varies = false, truth_varies = false;
    double p0 = 0.0, t0 = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!usable(pred[i], truth[i])) continue;
        // Exact comparison: rounding in the mean would give a constant path
        // a tiny nonzero variance.
        if (n == 0) {
            p0 = pred[i];
            t0 = truth[i];
        }
        pred_varies = pred_varies || pred[i] != p0;
        truth_varies = truth_varies || truth[i] != t0;
        sp += pred[i];
        st += truth[i];
        ++n;
    }
    if (n < 3 || !pred_varies || !truth_varies) return std::nullopt;
    const double mp = sp / static_cast<double>(n), mt = st / static_cast<double>(n);
    double cpp = 0.0, ctt = 0.0, cpt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!usable(pred[i], truth[i])) continue;
        const double a = pred[i] - mp, b = truth[i] - mt;
        cpp += a * a;
        ctt += b * b;
        cpt += a * b;
    }
    if (cpp == 0.0 || ctt == 0.0) return std::nullopt;
    return std::clamp(cpt / std::sqrt(cpp * ctt), -1.0, 1.0);
}

std::string_view context_name(Context c) noexcept {
    switch (c) {
        case Context::Anytime: return "anytime";
        case Context::Night: return "night";
        case Context::Day: return "day";
        case Context::RecentMeal: return "recent_meal";
        case Context::RecentBolus: return "recent_bolus";
        case Context::Hypo: return "hypo";
        case Context::Hyper: return "hyper";
    }
    return "unknown";
}

const std::vector<Context>& all_contexts() {
    static const std::vector<Context> all{Context::Anytime,    Context::Night,       Context::Day, Context::RecentMeal,
                                          Context::RecentBolus, Context::Hypo,       Context::Hyper};
    return all;
}

nlohmann::json ContextSpec::to_json() const {
    return {{"night_start_minute", night_start_minute}, {"night_end_minute", night_end_minute},
            {"meal_window_minutes", meal_window_minutes}, {"bolus_window_minutes", bolus_window_minutes},
            {"hypo_mg_dl", hypo_mg_dl},                  {"hyper_mg_dl", hyper_mg_dl}};
}

ContextSpec ContextSpec::from_json(const nlohmann::json& j) {
    require_known_keys(j,
                       {"night_start_minute", "night_end_minute", "meal_window_minutes", "bolus_window_minutes",
                        "hypo_mg_dl", "hyper_mg_dl"},
                       "contexts");
    ContextSpec c;
    c.night_start_minute = j.value("night_start_minute", c.night_start_minute);
    c.night_end_minute = j.value("night_end_minute", c.night_end_minute);
    c.meal_window_minutes = j.value("meal_window_minutes", c.meal_window_minutes);
    c.bolus_window_minutes = j.value("bolus_window_minutes", c.bolus_window_minutes);
    c.hypo_mg_dl = j.value("hypo_mg_dl", c.hypo_mg_dl);
    c.hyper_mg_dl = j.value("hyper_mg_dl", c.hyper_mg_dl);
    if (c.meal_window_minutes < 0.0 || c.bolus_window_minutes < 0.0 || c.hypo_mg_dl >= c.hyper_mg_dl) {
        throw ConfigError("invalid context thresholds");
    }
    return c;
}

std::vector<Context> contexts_of(const data::GriddedSeries& series, std::size_t anchor, const ContextSpec& spec) {
    std::vector<Context> out{Context::Anytime};
    const double mod = series.minute_of_day(anchor);
    const bool night = spec.night_start_minute <= spec.night_end_minute
                           ? (mod >= spec.night_start_minute && mod < spec.night_end_minute)
                           : (mod >= spec.night_start_minute || mod < spec.night_end_minute);
    out.push_back(night ? Context::Night : Context::Day);
    auto any_within = [&](const std::vector<double>& channel, double minutes) {
        const auto steps = static_cast<std::size_t>(std::ceil(minutes / data::kStepMinutes));
        for (std::size_t k = 0; k < steps && k <= anchor; ++k)
            if (channel[anchor - k] > 0.0) return true;
        return false;
    };
    if (any_within(series.carbs, spec.meal_window_minutes)) out.push_back(Context::RecentMeal);
    if (any_within(series.bolus, spec.bolus_window_minutes)) out.push_back(Context::RecentBolus);
    const double g = series.cgm[anchor];
    if (std::isfinite(g) && g < spec.hypo_mg_dl) out.push_back(Context::Hypo);
    if (std::isfinite(g) && g > spec.hyper_mg_dl) out.push_back(Context::Hyper);
    return out;
}

int EvalOptions::max_horizon() const {
    if (horizons.empty()) return 72;
    return *std::max_element(horizons.begin(), horizons.end());
}

nlohmann::json EvalOptions::to_json() const {
    return {{"horizons", horizons}, {"n_anchors", n_anchors}, {"seed", seed}, {"contexts", contexts.to_json()},
            {"path_scoring", path_scoring}};
}

EvalOptions EvalOptions::from_json(const nlohmann::json& j) {
    require_known_keys(j, {"horizons", "n_anchors", "seed", "contexts", "path_scoring"}, "evaluate");
    EvalOptions o;
    o.horizons = j.value("horizons", o.horizons);
    o.n_anchors = j.value("n_anchors", o.n_anchors);
    o.seed = j.value("seed", o.seed);
    if (j.contains("contexts")) o.contexts = ContextSpec::from_json(j.at("contexts"));
    o.path_scoring = j.value("path_scoring", o.path_scoring);
    for (int h : o.horizons)
        if (h < 1) throw ConfigError("horizons must be at least one step");
    if (o.n_anchors < 0) throw ConfigError("n_anchors must be non-negative");
    return o;
}

std::vector<std::size_t> sample_anchors(std::size_t begin, std::size_t end, const EvalOptions& opts) {
    if (begin >= end) throw DataError("empty evaluation range");
    std::vector<std::size_t> all;
    if (opts.n_anchors == 0) {
        for (std::size_t a = begin; a + 1 < end; ++a) all.push_back(a);
        return all;
    }
    const auto H = static_cast<std::size_t>(opts.max_horizon());
    for (std::size_t a = begin; a + H < end; ++a) all.push_back(a);
    if (all.empty()) throw DataError("evaluation range is shorter than the longest horizon");
    const auto n = std::min(all.size(), static_cast<std::size_t>(opts.n_anchors));
    Rng rng(opts.seed, 0xA7C4);
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(all.size()) - 1));
        std::swap(all[i], all[j]);
    }
    all.resize(n);
    std::sort(all.begin(), all.end());
    return all;
}

AnchorForecasts collect_forecasts(baselines::Forecaster& f, const data::GriddedSeries& series,
                                  const std::vector<std::size_t>& anchors, int horizon) {
    AnchorForecasts out;
    out.model = f.name();
    for (std::size_t a : anchors) {
        try {
            Eigen::VectorXd p = f.forecast(series, a, horizon);
            if (p.size() != horizon) throw DimensionError(f.name() + " returned a path of the wrong length");
            out.anchors.push_back(a);
            out.paths.push_back(std::move(p));
        } catch (const ForecastError&) {
            ++out.failed;
        }
    }
    return out;
}

std::vector<MetricRow> score(const AnchorForecasts& fc, const data::GriddedSeries& series, std::size_t begin,
                             std::size_t end, const EvalOptions& opts) {
    if (end > series.size() || begin >= end) throw DataError("scoring range outside the series");
    std::vector<int> horizons = opts.horizons;
    if (horizons.empty())
        for (int h = 1; h <= 72; ++h) horizons.push_back(h);
    const std::span<const double> segment(series.cgm.data() + begin, end - begin);
    const int H = *std::max_element(horizons.begin(), horizons.end());

    // Naive scale per step ahead; empty when undefined on this segment.
    std::vector<std::optional<double>> scale(static_cast<std::size_t>(H) + 1);
    for (int k = 1; k <= H; ++k) {
        try {
            scale[static_cast<std::size_t>(k)] = naive_scale(segment, k);
        } catch (const UndefinedMetricError&) {
        }
    }

    std::vector<std::vector<Context>> member(fc.anchors.size());
    for (std::size_t i = 0; i < fc.anchors.size(); ++i) member[i] = contexts_of(series, fc.anchors[i], opts.contexts);

    std::vector<MetricRow> rows;
    const auto& ctxs = all_contexts();
    for (int h : horizons) {
        std::vector<Cell> cells(ctxs.size());
        for (std::size_t i = 0; i < fc.anchors.size(); ++i) {
            const std::size_t a = fc.anchors[i];
            const auto& path = fc.paths[i];
            if (path.size() < h) continue;
            Cell one;
            const int k_first = opts.path_scoring ? 1 : h;
            for (int k = k_first; k <= h; ++k) {
                const std::size_t target = a + static_cast<std::size_t>(k);
                if (target >= end || target < begin) continue;
                const double p = path(k - 1), y = series.cgm[target];
                if (!usable(p, y)) continue;
                const double err = p - y;
                ++one.n;
                one.abs_sum += std::abs(err);
                one.sq_sum += err * err;
                const auto& sc = scale[static_cast<std::size_t>(k)];
                if (sc) one.scaled_sum += std::abs(err) / *sc;
                else one.scaled_ok = false;
            }
            if (one.n == 0) continue;
            std::vector<double> pp, tt;
            for (int k = 1; k <= h; ++k) {
                const std::size_t target = a + static_cast<std::size_t>(k);
                if (target >= end) break;
                pp.push_back(path(k - 1));
                tt.push_back(series.cgm[target]);
            }
            const auto corr = forecast_correlation(pp, tt);
            for (Context c : member[i]) {
                Cell& cell = cells[static_cast<std::size_t>(c)];
                cell.n += one.n;
                cell.abs_sum += one.abs_sum;
                cell.sq_sum += one.sq_sum;
                cell.scaled_sum += one.scaled_sum;
                cell.scaled_ok = cell.scaled_ok && one.scaled_ok;
                if (corr) {
                    cell.corr_sum += *corr;
                    ++cell.corr_n;
                }
            }
        }
        for (std::size_t c = 0; c < ctxs.size(); ++c) {
            const Cell& cell = cells[c];
            MetricRow r;
            r.model = fc.model;
            r.horizon_min = h * data::kStepMinutes;
            r.context = std::string(context_name(ctxs[c]));
            r.n = cell.n;
            if (cell.n > 0) {
                const double n = static_cast<double>(cell.n);
                r.mae = cell.abs_sum / n;
                r.rmse = std::sqrt(cell.sq_sum / n);
                // Endpoint scoring divides the cell MAE by one scale, which keeps
                // the naive forecaster at exactly 1 on full coverage.
                const auto& sc = scale[static_cast<std::size_t>(h)];
                if (!opts.path_scoring && sc) r.mase = *r.mae / *sc;
                if (opts.path_scoring && cell.scaled_ok) r.mase = cell.scaled_sum / n;
            }
            if (cell.corr_n > 0) r.corr = cell.corr_sum / static_cast<double>(cell.corr_n);
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

std::vector<MetricRow> evaluate(baselines::Forecaster& f, const data::GriddedSeries& series, std::size_t begin,
                                std::size_t end, const EvalOptions& opts) {
    const auto anchors = sample_anchors(begin, end, opts);
    const auto fc = collect_forecasts(f, series, anchors, opts.max_horizon());
    return score(fc, series, begin, end, opts);
}

void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "model,horizon_min,context,n,mae,rmse,mase,corr\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.horizon_min << ',' << r.context << ',' << r.n << ',' << opt_field(r.mae) << ','
            << opt_field(r.rmse) << ',' << opt_field(r.mase) << ',' << opt_field(r.corr) << '\n';
    }
}

}  // namespace dtdsim::eval
