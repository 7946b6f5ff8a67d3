#pragma once

#include <stdexcept>
#include <string>

namespace twinforge {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad caller-supplied values (ranks, densities, rates out of domain).
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Tensor/matrix dimension problems.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Malformed container files (bad header, offsets, dtype).
class FormatError : public Error {
public:
    using Error::Error;
};

// Non-finite data where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Training diverged (loss became non-finite).
class TrainingError : public NumericError {
public:
    using NumericError::NumericError;
};

// Checkpoints/deltas whose name sets or shapes do not line up.
class CompatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Empty or otherwise unusable datasets.
class DataError : public Error {
public:
    using Error::Error;
};

// Operation called on an object in the wrong state (e.g. no adapter attached).
class StateError : public Error {
public:
    using Error::Error;
};

// Invalid run configuration (unknown keys, inconsistent sections).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Metric preconditions violated (e.g. non-positive reference score).
class MetricError : public Error {
public:
    using Error::Error;
};

}  // namespace twinforge
