#pragma once

#include <stdexcept>
#include <string>

namespace shellflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Two shell states (or measures) of incompatible size were combined.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid model, noise or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// A state became non-finite or exceeded the blow-up threshold.
class BlowUpError : public Error {
public:
    BlowUpError(const std::string& what, double time)
        : Error(what + " at t=" + std::to_string(time)), time_(time) {}

    double time() const noexcept { return time_; }

private:
    double time_;
};

/// A hypothesis of the finite-state criterion fails at a named stage.
class HypothesisError : public Error {
public:
    HypothesisError(const std::string& stage, const std::string& what)
        : Error(stage + ": " + what), stage_(stage) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace shellflow
