#pragma once

#include <stdexcept>
#include <string>

namespace mergeq {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or architecture mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument violates a documented precondition (non-finite values, h <= 0, bad spec).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Index or scalar argument outside its admissible range.
class RangeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Malformed or incompatible on-disk artifact.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace mergeq
