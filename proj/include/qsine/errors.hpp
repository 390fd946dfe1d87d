#pragma once

#include <stdexcept>
#include <string>

namespace qsine {

/// Invalid argument to an operation (bad sizes, out-of-range parameters).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Input data that cannot be processed (all-zero frame, non-finite samples).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// A rejection sampler exceeded its iteration cap.
struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Model bundle or network wiring is incomplete or inconsistent.
struct ConfigurationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable data/model file.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace qsine
