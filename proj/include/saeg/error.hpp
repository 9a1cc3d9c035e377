#pragma once

#include <stdexcept>
#include <string>

namespace saeg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible matrix/vector dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf where a finite value is required, or a degenerate denominator.
struct NumericError : Error {
    using Error::Error;
};

// Invalid user-supplied configuration (bad k, empty layer set, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Well-formed file or argument whose content violates a data contract.
struct DataError : Error {
    using Error::Error;
};

// Unrecognized file format (bad magic, unsupported version).
struct FormatError : Error {
    using Error::Error;
};

// File recognized but payload inconsistent with its header.
struct CorruptionError : Error {
    using Error::Error;
};

struct StorageError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    using Error::Error;
};

} // namespace saeg
