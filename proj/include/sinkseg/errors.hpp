#pragma once

#include <stdexcept>
#include <string>

namespace sinkseg {

// Matrix dimensions do not conform.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A configuration value is outside its documented range.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// An instance exceeds a documented size cap.
struct SizeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A user-supplied callback produced a non-finite value.
struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or unwritable file.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace sinkseg
