#pragma once

#include <stdexcept>
#include <string>

namespace forgelens {

/// Base for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument. The CLI maps this to exit status 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Checksum or framing failure while reading a container.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Gradient tape misuse (double backward, non-scalar root, ...).
class TapeError : public Error {
public:
    using Error::Error;
};

} // namespace forgelens
