#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fable {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ValueError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct TransportError : Error {
    using Error::Error;
};

struct ContentError : Error {
    using Error::Error;
};

struct IncompleteDataError : Error {
    using Error::Error;
};

// Thrown when autoregressive decoding emits a malformed plot structure.
// Carries whatever plots were recovered before the failure.
struct DecodeError : Error {
    DecodeError(const std::string& msg, std::vector<std::string> partial_plots)
        : Error(msg), partial(std::move(partial_plots)) {}
    std::vector<std::string> partial;
};

}  // namespace fable
