#pragma once

#include <stdexcept>
#include <string>

namespace dtdsim {

/// Base class for every error raised by the engine. `kind()` is a stable
/// machine-readable tag used by the CLI error records.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define DTDSIM_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                          \
    public:                                                              \
        explicit Name(const std::string& message) : Error(tag, message) {} \
    }

DTDSIM_DEFINE_ERROR(StateValidityError, "state_validity");
DTDSIM_DEFINE_ERROR(DivergenceError, "divergence");
DTDSIM_DEFINE_ERROR(InitializationError, "initialization");
DTDSIM_DEFINE_ERROR(DimensionError, "dimension_mismatch");
DTDSIM_DEFINE_ERROR(UnsupportedPrimitiveError, "unsupported_primitive");
DTDSIM_DEFINE_ERROR(UndefinedMetricError, "undefined_metric");
DTDSIM_DEFINE_ERROR(DataError, "data");
DTDSIM_DEFINE_ERROR(ConfigError, "config");
DTDSIM_DEFINE_ERROR(FingerprintError, "fingerprint_mismatch");
DTDSIM_DEFINE_ERROR(ConvergenceError, "convergence");
DTDSIM_DEFINE_ERROR(FitError, "fit");
DTDSIM_DEFINE_ERROR(ForecastError, "forecast");

#undef DTDSIM_DEFINE_ERROR

}  // namespace dtdsim
