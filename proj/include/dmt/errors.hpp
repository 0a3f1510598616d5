#pragma once

#include <stdexcept>
#include <string>

namespace dmt {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct DimensionMismatch : Error {
    using Error::Error;
};

/// DMT1 tensor file with a bad magic, rank, dims, or non-finite payload.
struct MalformedHeader : Error {
    using Error::Error;
};

/// DMT1 tensor file whose payload is shorter than the header promises.
struct TruncatedPayload : Error {
    using Error::Error;
};

/// det(C^T C + ridge I) fell below 1e-12; fg/bg prototypes are collinear.
struct SingularPrototypeMatrix : Error {
    using Error::Error;
};

/// Mask (or soft weight map) sums below 1e-6; no region to pool over.
struct EmptyMask : Error {
    using Error::Error;
};

struct NoValidPrototypes : Error {
    using Error::Error;
};

struct ZeroPrototype : Error {
    using Error::Error;
};

struct InsufficientData : Error {
    using Error::Error;
};

struct NonFiniteLoss : Error {
    using Error::Error;
};

/// Backward called with a cache that no longer matches the parameters.
struct StaleCache : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace dmt
