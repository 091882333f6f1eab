#pragma once

#include <stdexcept>
#include <string>

namespace iml {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A leaf tensor contained NaN or Inf at construction time.
struct NonFiniteInput : Error {
    using Error::Error;
};

// Evaluation produced NaN or Inf; message names the first offending node.
struct NonFiniteValue : Error {
    using Error::Error;
};

// Operand shapes do not conform for the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// Operation tag not recognized by the dynamic dispatcher.
struct UnsupportedOp : Error {
    using Error::Error;
};

// Parameter layout inconsistent with the flat value array.
struct LayoutError : Error {
    using Error::Error;
};

// Bad experiment or distribution configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed episode file; message carries the byte offset.
struct ParseError : Error {
    using Error::Error;
};

// Cross pairing requested for tasks without a shared label space.
struct PairingError : Error {
    using Error::Error;
};

// Filesystem failure, annotated with the path.
struct IoError : Error {
    using Error::Error;
};

}  // namespace iml
