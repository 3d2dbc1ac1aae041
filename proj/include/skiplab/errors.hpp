#pragma once

#include <stdexcept>
#include <string>

namespace skiplab {

// Exception taxonomy used across the library. The CLI maps ConfigError to a
// distinct exit code, everything else derived from Error counts as a stage
// failure.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct InputError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct TapeError : Error {
    using Error::Error;
};

struct DegenerateBatchError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    DivergenceError(const std::string& what, long step) : Error(what), step(step) {}
    long step;
};

}  // namespace skiplab
