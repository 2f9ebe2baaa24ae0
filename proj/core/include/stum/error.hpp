#pragma once

#include <stdexcept>
#include <string>

namespace stum {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};
struct AxisOutOfRange : Error {
    using Error::Error;
};
struct NotScalarLoss : Error {
    using Error::Error;
};
struct NonFiniteInput : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct DimensionMismatch : Error {
    using Error::Error;
};
struct NonFiniteValue : Error {
    using Error::Error;
};
struct SeriesTooShort : Error {
    using Error::Error;
};
struct DegenerateChannel : Error {
    using Error::Error;
};
struct MissingGraph : Error {
    using Error::Error;
};
struct MissingGrad : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct EmptyObservationSet : Error {
    using Error::Error;
};
struct CheckpointMismatch : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace stum
