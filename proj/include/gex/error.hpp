#pragma once

#include <stdexcept>
#include <string>

namespace gex {

// Error taxonomy used across the library. The CLI maps ConfigError-like
// failures to exit code 2 and NumericError to exit code 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape disagreement; message names the offending axis.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid operator/model/run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Operation attempted in an invalid state (missing grads, unpopulated stats).
struct StateError : Error {
    using Error::Error;
};

// API misuse (e.g. backward from a non-scalar).
struct UsageError : Error {
    using Error::Error;
};

// Malformed on-disk data; message carries the byte offset where known.
struct FormatError : Error {
    using Error::Error;
};

// Non-finite values or failed numeric checks at runtime.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace gex
