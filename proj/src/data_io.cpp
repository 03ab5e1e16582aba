#include "dtdsim/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <fmt/format.h>

#include "dtdsim/errors.hpp"
#include "dtdsim/json_keys.hpp"
#include "dtdsim/rng.hpp"

namespace dtdsim::data {

using physio::Param;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_number(const std::string& s, const std::string& where) {
    if (s.empty()) return kNaN;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw DataError("not a number: '" + s + "' in " + where);
    return v;
}

std::string fmt_num(double v) {
    if (!(v == v)) return "";
    return fmt::format("{}", v);
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_channel(std::uint64_t h, const std::vector<double>& v) {
    for (double x : v) {
        const double canon = (x == x) ? x : kNaN;
        h = fnv1a(h, &canon, sizeof canon);
    }
    return h;
}

}  // namespace

// ---- timestamps -------------------------------------------------------------

std::int64_t days_from_civil(int y, unsigned m, unsigned d) noexcept {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

namespace {

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y = static_cast<int>(yoe) + static_cast<int>(era) * 400 + (m <= 2);
}

}  // namespace

Timestamp parse_iso8601(const std::string& text) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0;
    double sec = 0.0;
    int consumed = 0;
    const char* s = text.c_str();
    if (std::sscanf(s, "%4d-%2d-%2d%*1[T ]%2d:%2d%n", &y, &mo, &d, &h, &mi, &consumed) < 5) {
        throw DataError("malformed timestamp '" + text + "'");
    }
    const char* p = s + consumed;
    if (*p == ':') {
        int n = 0;
        if (std::sscanf(p + 1, "%lf%n", &sec, &n) < 1) throw DataError("malformed seconds in '" + text + "'");
        p += 1 + n;
    }
    int offset = 0;
    if (*p == 'Z' || *p == 'z') {
        ++p;
    } else if (*p == '+' || *p == '-') {
        const int sign = *p == '-' ? -1 : 1;
        int oh = 0, om = 0, n = 0;
        if (std::sscanf(p + 1, "%2d:%2d%n", &oh, &om, &n) < 2) {
            n = 0;
            if (std::sscanf(p + 1, "%2d%2d%n", &oh, &om, &n) < 2) throw DataError("malformed offset in '" + text + "'");
        }
        offset = sign * (oh * 60 + om);
        p += 1 + n;
    }
    if (*p != '\0') throw DataError("trailing characters in timestamp '" + text + "'");
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec < 0.0 || sec >= 61.0) {
        throw DataError("timestamp out of range '" + text + "'");
    }
    const std::int64_t local = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * kDaySeconds +
                               h * 3600 + mi * 60 + static_cast<std::int64_t>(std::floor(sec));
    return {local - offset * 60, offset};
}

std::string format_iso8601(std::int64_t epoch, int tz_offset_minutes) {
    const std::int64_t local = epoch + tz_offset_minutes * 60;
    const std::int64_t days = floor_div(local, kDaySeconds);
    const std::int64_t rem = local - days * kDaySeconds;
    int y = 0;
    unsigned m = 0, d = 0;
    civil_from_days(days, y, m, d);
    const int off = std::abs(tz_offset_minutes);
    return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}{}{:02d}:{:02d}", y, m, d, rem / 3600, (rem / 60) % 60,
                       rem % 60, tz_offset_minutes < 0 ? '-' : '+', off / 60, off % 60);
}

// ---- raw events -------------------------------------------------------------

void RawEventLog::validate() const {
    auto check = [](const std::vector<RawEvent>& v, const char* kind, bool positive) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!std::isfinite(v[i].value) || v[i].value < 0.0 || (positive && v[i].value <= 0.0)) {
                throw DataError(fmt::format("{} event {} has invalid value {}", kind, i, v[i].value));
            }
            if (i > 0 && v[i].time <= v[i - 1].time) {
                throw DataError(fmt::format("{} timestamps are not strictly increasing at event {}", kind, i));
            }
        }
    };
    check(cgm, "cgm", true);
    check(insulin, "insulin", false);
    check(carbs, "carbs", false);
    check(energy, "energy", false);
}

std::vector<RawEvent> read_event_csv(const std::string& path, int* tz_offset_minutes) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open event file " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("event file is empty: " + path);
    const auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "timestamp" || header[1] != "value") {
        throw DataError("event file " + path + " must start with header 'timestamp,value[,tag]'");
    }
    std::vector<RawEvent> out;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() < 2) throw DataError(fmt::format("{}:{}: expected at least two fields", path, row));
        const Timestamp ts = parse_iso8601(f[0]);
        if (tz_offset_minutes != nullptr && out.empty()) *tz_offset_minutes = ts.tz_offset_minutes;
        RawEvent e{ts.epoch, parse_number(f[1], path), f.size() > 2 ? f[2] : std::string{}};
        if (!(e.value == e.value)) throw DataError(fmt::format("{}:{}: missing value", path, row));
        out.push_back(std::move(e));
    }
    return out;
}

void write_event_csv(const std::string& path, const std::vector<RawEvent>& events, int tz_offset_minutes) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "timestamp,value,tag\n";
    for (const auto& e : events) out << format_iso8601(e.time, tz_offset_minutes) << ',' << fmt_num(e.value) << ',' << e.tag << '\n';
}

RawEventLog read_event_log(const std::string& dir) {
    namespace fs = std::filesystem;
    RawEventLog log;
    const fs::path root(dir);
    log.cgm = read_event_csv((root / "cgm.csv").string(), &log.tz_offset_minutes);
    auto optional = [&](const char* name, std::vector<RawEvent>& dst) {
        const fs::path p = root / name;
        if (fs::exists(p)) dst = read_event_csv(p.string());
    };
    optional("insulin.csv", log.insulin);
    optional("carbs.csv", log.carbs);
    optional("energy.csv", log.energy);
    log.validate();
    return log;
}

void write_event_log(const std::string& dir, const RawEventLog& log) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path root(dir);
    write_event_csv((root / "cgm.csv").string(), log.cgm, log.tz_offset_minutes);
    write_event_csv((root / "insulin.csv").string(), log.insulin, log.tz_offset_minutes);
    write_event_csv((root / "carbs.csv").string(), log.carbs, log.tz_offset_minutes);
    write_event_csv((root / "energy.csv").string(), log.energy, log.tz_offset_minutes);
}

// ---- gridded series -----------------------------------------------------------

double GriddedSeries::minute_of_day(std::size_t t) const noexcept {
    const std::int64_t local = timestamp(t) + tz_offset_minutes * 60;
    const std::int64_t sec = local - floor_div(local, kDaySeconds) * kDaySeconds;
    return static_cast<double>(sec) / 60.0;
}

double GriddedSeries::interpolated_fraction() const noexcept {
    if (interpolated.empty()) return 0.0;
    return static_cast<double>(std::count(interpolated.begin(), interpolated.end(), 1)) /
           static_cast<double>(interpolated.size());
}

double GriddedSeries::missing_fraction() const noexcept {
    if (cgm.empty()) return 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < cgm.size(); ++t) n += missing(t) ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(cgm.size());
}

GriddedSeries GriddedSeries::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw DataError("slice out of range");
    auto cut = [&](const auto& v) { return std::decay_t<decltype(v)>(v.begin() + begin, v.begin() + end); };
    GriddedSeries s;
    s.start = timestamp(begin);
    s.tz_offset_minutes = tz_offset_minutes;
    s.cgm = cut(cgm);
    s.insulin = cut(insulin);
    s.bolus = cut(bolus);
    s.carbs = cut(carbs);
    s.energy = cut(energy);
    s.interpolated = cut(interpolated);
    return s;
}

std::vector<physio::ExogenousInput> GriddedSeries::inputs() const {
    std::vector<physio::ExogenousInput> u(size());
    for (std::size_t t = 0; t < size(); ++t) u[t] = input(t);
    return u;
}

std::vector<double> GriddedSeries::minutes_of_day() const {
    std::vector<double> m(size());
    for (std::size_t t = 0; t < size(); ++t) m[t] = minute_of_day(t);
    return m;
}

void GriddedSeries::check() const {
    const auto n = cgm.size();
    if (insulin.size() != n || bolus.size() != n || carbs.size() != n || energy.size() != n ||
        interpolated.size() != n) {
        throw DataError("gridded series channels differ in length");
    }
}

GriddedSeries GriddedSeries::empty(std::int64_t start, std::size_t n, int tz_offset_minutes) {
    GriddedSeries s;
    s.start = start;
    s.tz_offset_minutes = tz_offset_minutes;
    s.cgm.assign(n, kNaN);
    s.insulin.assign(n, 0.0);
    s.bolus.assign(n, 0.0);
    s.carbs.assign(n, 0.0);
    s.energy.assign(n, 0.0);
    s.interpolated.assign(n, 0);
    return s;
}

GriddedSeries resample_to_grid(const RawEventLog& log, std::int64_t start, std::int64_t end,
                               const ResampleOptions& opts) {
    if (log.empty()) throw DataError("cannot resample an empty event log");
    if (!(start < end)) throw DataError("resample: start must precede end");
    if ((start % kStepSeconds) != 0 || (end % kStepSeconds) != 0) {
        throw DataError("resample: bounds must be aligned to the 5-minute grid");
    }
    const auto n = static_cast<std::size_t>((end - start) / kStepSeconds);
    GriddedSeries g = GriddedSeries::empty(start, n, log.tz_offset_minutes);
    const double max_gap_s = opts.max_gap_minutes * 60.0;

    const auto& r = log.cgm;
    for (std::size_t t = 0; t < n; ++t) {
        const std::int64_t at = g.timestamp(t);
        auto it = std::lower_bound(r.begin(), r.end(), at, [](const RawEvent& e, std::int64_t v) { return e.time < v; });
        if (it != r.end() && it->time == at) {
            g.cgm[t] = it->value;
            continue;
        }
        if (it == r.end() || it == r.begin()) continue;
        const RawEvent& after = *it;
        const RawEvent& before = *(it - 1);
        const auto span = static_cast<double>(after.time - before.time);
        if (span > max_gap_s) continue;
        const double w = static_cast<double>(at - before.time) / span;
        g.cgm[t] = before.value + w * (after.value - before.value);
    }

    auto bin = [&](std::int64_t time) -> std::optional<std::size_t> {
        if (time < start || time >= end) return std::nullopt;
        return static_cast<std::size_t>((time - start) / kStepSeconds);
    };
    for (const auto& e : log.insulin) {
        if (auto t = bin(e.time)) {
            g.insulin[*t] += e.value;
            if (e.tag == "bolus") g.bolus[*t] += e.value;
        }
    }
    for (const auto& e : log.carbs)
        if (auto t = bin(e.time)) g.carbs[*t] += e.value;
    for (const auto& e : log.energy)
        if (auto t = bin(e.time)) g.energy[*t] += e.value;
    return g;
}

GapFillResult interpolate_gaps(const GriddedSeries& series, double max_gap_minutes) {
    GapFillResult out{series, {}};
    GriddedSeries& s = out.series;
    const std::size_t n = s.size();
    const double max_steps = max_gap_minutes / kStepMinutes;
    std::size_t prev = n;  // index of last observed point
    for (std::size_t t = 0; t < n; ++t) {
        if (s.missing(t)) continue;
        if (prev != n && t - prev > 1 && static_cast<double>(t - prev) <= max_steps) {
            const double a = s.cgm[prev], b = s.cgm[t];
            const auto span = static_cast<double>(t - prev);
            for (std::size_t k = prev + 1; k < t; ++k) {
                const double w = static_cast<double>(k - prev) / span;
                s.cgm[k] = a + w * (b - a);
                s.interpolated[k] = 1;
                ++out.report.filled;
            }
        }
        prev = t;
    }
    for (std::size_t t = 0; t < n; ++t) out.report.still_missing += s.missing(t) ? 1 : 0;
    out.report.filled_fraction = n > 0 ? static_cast<double>(out.report.filled) / static_cast<double>(n) : 0.0;
    return out;
}

Split split(const GriddedSeries& series, int train_days, int valid_days, int test_days) {
    if (train_days < 0 || valid_days < 0 || test_days < 0) throw DataError("split: day counts must be non-negative");
    const std::int64_t off = series.tz_offset_minutes * 60;
    auto ceil_midnight = [&](std::int64_t epoch) {
        const std::int64_t local = epoch + off;
        const std::int64_t day = floor_div(local + kDaySeconds - 1, kDaySeconds);
        return day * kDaySeconds - off;
    };
    const std::int64_t b1 = ceil_midnight(series.start + train_days * kDaySeconds);
    const std::int64_t b2 = b1 + valid_days * kDaySeconds;
    const std::int64_t b3 = b2 + test_days * kDaySeconds;
    const std::int64_t end = series.timestamp(series.size());
    if (end < b3) {
        throw DataError(fmt::format("split needs {} days of data after the start; series covers {:.2f}",
                                    train_days + valid_days + test_days,
                                    static_cast<double>(end - series.start) / kDaySeconds));
    }
    auto idx = [&](std::int64_t ts) { return static_cast<std::size_t>((ts - series.start) / kStepSeconds); };
    return {series.slice(0, idx(b1)), series.slice(idx(b1), idx(b2)), series.slice(idx(b2), idx(b3))};
}

void write_gridded_csv(const std::string& path, const GriddedSeries& s) {
    s.check();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "timestamp,epoch_s,cgm,insulin_u,bolus_u,carbs_g,energy,gap,interpolated\n";
    for (std::size_t t = 0; t < s.size(); ++t) {
        out << format_iso8601(s.timestamp(t), s.tz_offset_minutes) << ',' << s.timestamp(t) << ',' << fmt_num(s.cgm[t])
            << ',' << fmt_num(s.insulin[t]) << ',' << fmt_num(s.bolus[t]) << ',' << fmt_num(s.carbs[t]) << ','
            << fmt_num(s.energy[t]) << ',' << (s.missing(t) ? 1 : 0) << ',' << int(s.interpolated[t]) << '\n';
    }
}

GriddedSeries read_gridded_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open gridded series " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("timestamp,epoch_s,cgm", 0) != 0) {
        throw DataError(path + " is not a gridded series CSV");
    }
    GriddedSeries s;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 9) throw DataError(fmt::format("{}:{}: expected 9 fields", path, row));
        const Timestamp ts = parse_iso8601(f[0]);
        const auto epoch = static_cast<std::int64_t>(parse_number(f[1], path));
        if (s.cgm.empty()) {
            s.start = epoch;
            s.tz_offset_minutes = ts.tz_offset_minutes;
        } else if (epoch != s.timestamp(s.cgm.size())) {
            throw DataError(fmt::format("{}:{}: rows are not on a contiguous 5-minute grid", path, row));
        }
        s.cgm.push_back(parse_number(f[2], path));
        s.insulin.push_back(parse_number(f[3], path));
        s.bolus.push_back(parse_number(f[4], path));
        s.carbs.push_back(parse_number(f[5], path));
        s.energy.push_back(parse_number(f[6], path));
        s.interpolated.push_back(f[8] == "1" ? 1 : 0);
    }
    for (auto* ch : {&s.insulin, &s.bolus, &s.carbs, &s.energy})
        for (double& v : *ch)
            if (!(v == v)) v = 0.0;
    return s;
}

nlohmann::json fingerprint(const GriddedSeries& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = hash_channel(h, s.cgm);
    h = hash_channel(h, s.insulin);
    h = hash_channel(h, s.bolus);
    h = hash_channel(h, s.carbs);
    h = hash_channel(h, s.energy);
    return {{"grid_start", format_iso8601(s.start, s.tz_offset_minutes)},
            {"length", s.size()},
            {"channel_hash", fmt::format("{:016x}", h)}};
}

double estimate_basal_rate(const GriddedSeries& s) {
    std::vector<double> v;
    v.reserve(s.size());
    for (std::size_t t = 0; t < s.size(); ++t) v.push_back(std::max(0.0, s.insulin[t] - s.bolus[t]));
    if (v.empty()) throw DataError("cannot estimate basal rate from an empty series");
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid / kStepMinutes;
}

// ---- synthetic data -------------------------------------------------------------

DynamicTrajectory DynamicTrajectory::sinusoidal_vmx(double amplitude) {
    DynamicTrajectory d;
    d.which = {Param::V_mx};
    d.amplitude = {amplitude};
    return d;
}

nlohmann::json DynamicTrajectory::to_json() const {
    nlohmann::json names = nlohmann::json::array();
    for (Param p : which) names.push_back(std::string(physio::param_name(p)));
    return {{"which", names}, {"amplitude", amplitude}, {"period_minutes", period_minutes},
            {"phase_minutes", phase_minutes}};
}

DynamicTrajectory DynamicTrajectory::from_json(const nlohmann::json& j) {
    require_known_keys(j, {"which", "amplitude", "period_minutes", "phase_minutes"}, "trajectory");
    DynamicTrajectory d;
    for (const auto& n : j.at("which")) {
        const auto p = physio::param_from_name(n.get<std::string>());
        if (!p) throw ConfigError("unknown parameter '" + n.get<std::string>() + "' in trajectory");
        d.which.push_back(*p);
    }
    d.amplitude = j.at("amplitude").get<std::vector<double>>();
    if (d.amplitude.size() != d.which.size()) throw ConfigError("trajectory needs one amplitude per parameter");
    d.period_minutes = j.value("period_minutes", 1440.0);
    d.phase_minutes = j.value("phase_minutes", 0.0);
    return d;
}

std::vector<MealTemplate> SynthSpec::default_meals() {
    return {{450.0, 45.0, 5.0}, {750.0, 60.0, 6.5}, {1140.0, 70.0, 7.5}};
}

nlohmann::json SynthSpec::to_json() const {
    nlohmann::json meals_j = nlohmann::json::array();
    for (const auto& m : meals)
        meals_j.push_back({{"minute_of_day", m.minute_of_day}, {"carbs_g", m.carbs_g}, {"bolus_u", m.bolus_u}});
    return {{"trajectory", trajectory.to_json()},
            {"meals", meals_j},
            {"meal_time_jitter_min", meal_time_jitter_min},
            {"carb_jitter_frac", carb_jitter_frac},
            {"target_glucose", target_glucose},
            {"sigma", sigma},
            {"days", days},
            {"seed", seed},
            {"gap_start_prob", gap_start_prob},
            {"gap_min_steps", gap_min_steps},
            {"gap_max_steps", gap_max_steps},
            {"start", format_iso8601(start_epoch, tz_offset_minutes)}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
    require_known_keys(j,
                       {"trajectory", "meals", "meal_time_jitter_min", "carb_jitter_frac", "target_glucose", "sigma",
                        "days", "seed", "gap_start_prob", "gap_min_steps", "gap_max_steps", "start"},
                       "synth");
    SynthSpec s;
    if (j.contains("trajectory")) s.trajectory = DynamicTrajectory::from_json(j.at("trajectory"));
    if (j.contains("meals")) {
        s.meals.clear();
        for (const auto& m : j.at("meals"))
            s.meals.push_back({m.at("minute_of_day").get<double>(), m.at("carbs_g").get<double>(),
                               m.value("bolus_u", 0.0)});
    }
    s.meal_time_jitter_min = j.value("meal_time_jitter_min", s.meal_time_jitter_min);
    s.carb_jitter_frac = j.value("carb_jitter_frac", s.carb_jitter_frac);
    s.target_glucose = j.value("target_glucose", s.target_glucose);
    s.sigma = j.value("sigma", s.sigma);
    s.days = j.value("days", s.days);
    s.seed = j.value("seed", s.seed);
    s.gap_start_prob = j.value("gap_start_prob", s.gap_start_prob);
    s.gap_min_steps = j.value("gap_min_steps", s.gap_min_steps);
    s.gap_max_steps = j.value("gap_max_steps", s.gap_max_steps);
    if (j.contains("start")) {
        const Timestamp ts = parse_iso8601(j.at("start").get<std::string>());
        s.start_epoch = ts.epoch;
        s.tz_offset_minutes = ts.tz_offset_minutes;
    }
    if (s.days < 1) throw ConfigError("synth: days must be at least 1");
    if (s.sigma < 0.0) throw ConfigError("synth: sigma must be non-negative");
    if (s.start_epoch % kStepSeconds != 0) throw ConfigError("synth: start must lie on the 5-minute grid");
    return s;
}

SynthResult synthesize(const physio::StaticParams& s_true, const SynthSpec& spec) {
    s_true.validate();
    if (spec.days < 1) throw ConfigError("synthesize needs days >= 1");
    if (spec.trajectory.amplitude.size() != spec.trajectory.which.size()) {
        throw ConfigError("trajectory needs one amplitude per parameter");
    }
    Rng rng(spec.seed);
    const auto T = static_cast<std::size_t>(spec.days) * static_cast<std::size_t>(kStepsPerDay);
    GriddedSeries g = GriddedSeries::empty(spec.start_epoch, T, spec.tz_offset_minutes);

    SynthTruth truth;
    truth.s = s_true;
    truth.sigma = spec.sigma;
    truth.which = spec.trajectory.which;
    truth.basal_u_per_min = physio::basal_for_glucose(s_true, spec.target_glucose);
    truth.x0 = physio::steady_state(s_true, truth.basal_u_per_min, spec.target_glucose);

    // Meals and energy, laid out day by day.
    const std::int64_t local_start = spec.start_epoch + spec.tz_offset_minutes * 60;
    const std::int64_t day0_local = floor_div(local_start, kDaySeconds) * kDaySeconds;
    for (int day = 0; day < spec.days; ++day) {
        for (const auto& m : spec.meals) {
            const double jitter = spec.meal_time_jitter_min > 0.0
                                      ? rng.uniform(-spec.meal_time_jitter_min, spec.meal_time_jitter_min)
                                      : 0.0;
            const double scale = 1.0 + (spec.carb_jitter_frac > 0.0
                                            ? rng.uniform(-spec.carb_jitter_frac, spec.carb_jitter_frac)
                                            : 0.0);
            // Meal times are local clock minutes counted from the first local midnight.
            const double local_min = static_cast<double>(day) * 1440.0 + m.minute_of_day + jitter;
            const double offset_s = static_cast<double>(day0_local - local_start) + local_min * 60.0;
            const auto step = static_cast<std::int64_t>(std::floor(offset_s / static_cast<double>(kStepSeconds)));
            if (step < 0 || step >= static_cast<std::int64_t>(T)) continue;
            const auto t = static_cast<std::size_t>(step);
            const double carbs = std::round(m.carbs_g * scale);
            g.carbs[t] += carbs;
            if (m.bolus_u > 0.0 && m.carbs_g > 0.0) g.bolus[t] += std::round(10.0 * m.bolus_u * carbs / m.carbs_g) / 10.0;
        }
        // One activity bout per day in the afternoon.
        const double bout_start = 960.0 + rng.uniform(-90.0, 90.0);
        const double bout_len = rng.uniform(20.0, 60.0);
        for (std::int64_t k = 0; k < kStepsPerDay; ++k) {
            const auto t = static_cast<std::size_t>(day * kStepsPerDay + k);
            if (t >= T) break;
            const double mod = g.minute_of_day(t);
            double met = (mod < 420.0 || mod >= 1380.0) ? 0.9 : 1.5;
            if (mod >= bout_start && mod < bout_start + bout_len) met = 5.0;
            g.energy[t] = met * kStepMinutes;
        }
    }

    const auto K = static_cast<Eigen::Index>(spec.trajectory.which.size());
    truth.d.resize(K, static_cast<Eigen::Index>(T));
    truth.x.resize(physio::kStateDim, static_cast<Eigen::Index>(T));
    truth.clean_cgm.resize(T);
    physio::Simulator sim(truth.x0);
    physio::ParamVec<double> p = s_true.values;
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t t = 0; t < T; ++t) {
        g.insulin[t] = truth.basal_u_per_min * kStepMinutes + g.bolus[t];
        const double phase = (g.minute_of_day(t) - spec.trajectory.phase_minutes) / spec.trajectory.period_minutes;
        for (Eigen::Index k = 0; k < K; ++k) {
            const Param which = spec.trajectory.which[static_cast<std::size_t>(k)];
            const double v = s_true[which] * (1.0 + spec.trajectory.amplitude[static_cast<std::size_t>(k)] *
                                                        std::sin(two_pi * phase));
            at(p, which) = v;
            truth.d(k, static_cast<Eigen::Index>(t)) = v;
        }
        const auto& x = sim.step(p, g.input(t));
        for (std::size_t i = 0; i < physio::kStateDim; ++i) truth.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = x[i];
        truth.clean_cgm[t] = physio::cgm_observe(x, s_true);
        g.cgm[t] = truth.clean_cgm[t] + spec.sigma * rng.normal();
    }

    if (spec.gap_start_prob > 0.0) {
        for (std::size_t t = 0; t < T; ++t) {
            if (rng.uniform() >= spec.gap_start_prob) continue;
            const auto len = static_cast<std::size_t>(rng.integer(spec.gap_min_steps, spec.gap_max_steps));
            for (std::size_t k = t; k < std::min(T, t + len); ++k) g.cgm[k] = kNaN;
            t += len;
        }
    }
    return {std::move(g), std::move(truth)};
}

RawEventLog to_event_log(const GriddedSeries& s) {
    RawEventLog log;
    log.tz_offset_minutes = s.tz_offset_minutes;
    for (std::size_t t = 0; t < s.size(); ++t) {
        const std::int64_t ts = s.timestamp(t);
        if (!s.missing(t)) log.cgm.push_back({ts, s.cgm[t], {}});
        const double basal = s.insulin[t] - s.bolus[t];
        if (basal > 0.0) log.insulin.push_back({ts, basal, "basal"});
        if (s.bolus[t] > 0.0) log.insulin.push_back({ts + kStepSeconds / 2, s.bolus[t], "bolus"});
        if (s.carbs[t] > 0.0) log.carbs.push_back({ts, s.carbs[t], {}});
        if (s.energy[t] > 0.0) log.energy.push_back({ts, s.energy[t], {}});
    }
    return log;
}

}  // namespace dtdsim::data
