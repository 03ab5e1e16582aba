#pragma once

// Raw event ingestion, the 5-minute grid, gap handling, splits and the
// synthetic data generator used as a ground-truth oracle.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtdsim/physio_sim.hpp"

namespace dtdsim::data {

inline constexpr std::int64_t kStepSeconds = 300;
inline constexpr double kStepMinutes = 5.0;
inline constexpr std::int64_t kDaySeconds = 86400;
inline constexpr std::int64_t kStepsPerDay = kDaySeconds / kStepSeconds;

// ---- timestamps ---------------------------------------------------------

struct Timestamp {
    std::int64_t epoch = 0;      // UTC seconds
    int tz_offset_minutes = 0;   // local = UTC + offset
};

/// Accepts YYYY-MM-DDTHH:MM[:SS[.fff]] followed by Z, +HH:MM, -HH:MM or
/// nothing (UTC). A space may replace the T.
Timestamp parse_iso8601(const std::string& text);
/// Local wall-clock time with explicit offset, e.g. 2024-01-01T06:00:00+01:00.
std::string format_iso8601(std::int64_t epoch, int tz_offset_minutes);

std::int64_t days_from_civil(int y, unsigned m, unsigned d) noexcept;

// ---- raw events -----------------------------------------------------------

struct RawEvent {
    std::int64_t time = 0;
    double value = 0.0;
    std::string tag;
};

struct RawEventLog {
    std::vector<RawEvent> cgm;      // mg/dL
    std::vector<RawEvent> insulin;  // U, tag "basal" or "bolus"
    std::vector<RawEvent> carbs;    // g
    std::vector<RawEvent> energy;   // METs
    int tz_offset_minutes = 0;

    bool empty() const noexcept { return cgm.empty() && insulin.empty() && carbs.empty() && energy.empty(); }
    /// Throws DataError on non-increasing timestamps within a kind, negative
    /// or non-finite values, or non-positive CGM.
    void validate() const;
};

/// Reads one event CSV with header `timestamp,value[,tag]`.
std::vector<RawEvent> read_event_csv(const std::string& path, int* tz_offset_minutes = nullptr);
void write_event_csv(const std::string& path, const std::vector<RawEvent>& events, int tz_offset_minutes);

/// Reads cgm.csv, insulin.csv, carbs.csv and energy.csv from `dir`; any file
/// except cgm.csv may be absent.
RawEventLog read_event_log(const std::string& dir);
void write_event_log(const std::string& dir, const RawEventLog& log);

// ---- gridded series -----------------------------------------------------------

struct GriddedSeries {
    std::int64_t start = 0;  // UTC epoch of step 0
    int tz_offset_minutes = 0;
    std::vector<double> cgm;      // mg/dL, NaN when missing
    std::vector<double> insulin;  // U delivered in the step (basal + bolus)
    std::vector<double> bolus;    // U of the insulin total tagged as bolus
    std::vector<double> carbs;    // g
    std::vector<double> energy;   // METs, summed per step
    std::vector<std::uint8_t> interpolated;

    std::size_t size() const noexcept { return cgm.size(); }
    bool missing(std::size_t t) const { return !(cgm[t] == cgm[t]); }
    std::int64_t timestamp(std::size_t t) const noexcept {
        return start + static_cast<std::int64_t>(t) * kStepSeconds;
    }
    /// Local minute of the day in [0, 1440).
    double minute_of_day(std::size_t t) const noexcept;
    double interpolated_fraction() const noexcept;
    double missing_fraction() const noexcept;

    /// Steps [begin, end).
    GriddedSeries slice(std::size_t begin, std::size_t end) const;
    /// Inputs of step t for the simulator.
    physio::ExogenousInput input(std::size_t t) const { return {insulin[t], carbs[t]}; }
    std::vector<physio::ExogenousInput> inputs() const;
    std::vector<double> minutes_of_day() const;

    /// Throws DataError when channel lengths differ.
    void check() const;

    static GriddedSeries empty(std::int64_t start, std::size_t n, int tz_offset_minutes = 0);
};

struct ResampleOptions {
    double max_gap_minutes = 60.0;
};

/// Grid [start, end) at 5 minutes. Both bounds must be step-aligned.
GriddedSeries resample_to_grid(const RawEventLog& log, std::int64_t start, std::int64_t end,
                               const ResampleOptions& opts = {});

struct GapReport {
    std::size_t filled = 0;
    std::size_t still_missing = 0;
    double filled_fraction = 0.0;
};

struct GapFillResult {
    GriddedSeries series;
    GapReport report;
};

/// Linear fill of interior CGM gaps whose flanking observations are at most
/// `max_gap_minutes` apart.
GapFillResult interpolate_gaps(const GriddedSeries& series, double max_gap_minutes = 60.0);

struct Split {
    GriddedSeries train, valid, test;
};

/// Contiguous train/valid/test ranges; each boundary falls on local
/// midnight. Throws DataError if the series is too short.
Split split(const GriddedSeries& series, int train_days = 90, int valid_days = 30, int test_days = 31);

void write_gridded_csv(const std::string& path, const GriddedSeries& series);
GriddedSeries read_gridded_csv(const std::string& path);

/// Grid start, length, and an FNV-1a hash of every channel.
nlohmann::json fingerprint(const GriddedSeries& series);

/// Median non-bolus insulin per step, in U/min.
double estimate_basal_rate(const GriddedSeries& series);

// ---- synthetic data -------------------------------------------------------------

/// d_k(t) = anchor_k * (1 + amplitude_k * sin(2 pi (tod - phase) / period)).
struct DynamicTrajectory {
    std::vector<physio::Param> which;
    std::vector<double> amplitude;
    double period_minutes = 1440.0;
    double phase_minutes = 0.0;

    static DynamicTrajectory sinusoidal_vmx(double amplitude = 0.3);
    nlohmann::json to_json() const;
    static DynamicTrajectory from_json(const nlohmann::json& j);
};

struct MealTemplate {
    double minute_of_day = 0.0;
    double carbs_g = 0.0;
    double bolus_u = 0.0;
};

struct SynthSpec {
    DynamicTrajectory trajectory = DynamicTrajectory::sinusoidal_vmx();
    std::vector<MealTemplate> meals = default_meals();
    double meal_time_jitter_min = 30.0;
    double carb_jitter_frac = 0.2;
    double target_glucose = 120.0;
    double sigma = 5.0;
    int days = 14;
    std::uint64_t seed = 0;
    /// Per-step probability of starting a CGM dropout, and its length range.
    double gap_start_prob = 0.0;
    int gap_min_steps = 1;
    int gap_max_steps = 6;
    std::int64_t start_epoch = 1704067200;  // 2024-01-01T00:00:00Z
    int tz_offset_minutes = 0;

    static std::vector<MealTemplate> default_meals();
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

struct SynthTruth {
    physio::StaticParams s;
    std::vector<physio::Param> which;
    Eigen::MatrixXd d;            // K x T hidden dynamic parameters
    Eigen::MatrixXd x;            // 13 x T states after each step
    std::vector<double> clean_cgm;
    physio::PhysioState x0;
    double basal_u_per_min = 0.0;
    double sigma = 0.0;
};

struct SynthResult {
    GriddedSeries series;
    SynthTruth truth;
};

/// Runs the simulator with the prescribed d_t trajectory from the basal
/// steady state, adds N(0, sigma^2) CGM noise and optional dropouts.
SynthResult synthesize(const physio::StaticParams& s_true, const SynthSpec& spec);

/// Raw-event view of a gridded series: one CGM reading per observed step,
/// one basal and one bolus event per step, one carb event per meal step.
RawEventLog to_event_log(const GriddedSeries& series);

}  // namespace dtdsim::data
