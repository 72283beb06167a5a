#pragma once

#include <stdexcept>
#include <string>

namespace iharmon {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A region (mask) selected no pixels.
class EmptyRegionError : public Error {
public:
    explicit EmptyRegionError(const std::string& what = "empty region") : Error(what) {}
};

/// Two inputs that must be spatially aligned were not.
class ShapeError : public Error {
public:
    using Error::Error;
};

} // namespace iharmon
