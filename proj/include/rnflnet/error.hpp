#pragma once

#include <stdexcept>
#include <string>

namespace rnfl {

// Base for every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents or image sizes that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN or Inf appeared in a value or gradient buffer.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or arguments; the CLI maps this to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input files (manifest, images, checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

// A resampled statistic was undefined in most bootstrap replicates.
class BootstrapError : public Error {
public:
    using Error::Error;
};

}  // namespace rnfl
