#pragma once

#include <stdexcept>
#include <string>

namespace cpolab {

/// Runtime failure: bad input, I/O, numerical divergence.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A well-formed request that breaks a documented precondition or invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace cpolab
