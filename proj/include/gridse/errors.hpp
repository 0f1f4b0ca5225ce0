#pragma once

#include <stdexcept>
#include <string>

namespace gridse {

// Base for everything this library throws on purpose. The CLI maps these to
// exit code 2 (bad input / infeasible request) while genuine defects
// (std::logic_error and friends) surface as exit code 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent case / corpus / checkpoint files.
struct InputError : Error {
    using Error::Error;
};

// Network topology or numerics make the requested computation undefined
// (disconnected grid, unobservable estimation, singular reduced matrix).
struct SingularSystemError : Error {
    using Error::Error;
};

// Iterative solve ran out of iterations without meeting its tolerance.
struct ConvergenceError : Error {
    using Error::Error;
};

// Attack construction cannot proceed (no feasible target line, empty
// meter support, conflicting options).
struct AttackError : Error {
    using Error::Error;
};

}  // namespace gridse
