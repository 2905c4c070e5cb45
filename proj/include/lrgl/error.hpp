#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lrgl {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input outside the admissible set of a model or operation.
class DomainError : public Error {
public:
    using Error::Error;
};

class PositivityError : public Error {
public:
    using Error::Error;
};

// Argument outside a tabulated or achievable range.
class RangeError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

class DegeneracyError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// Time stepping blew up or produced non-finite values.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

} // namespace lrgl
