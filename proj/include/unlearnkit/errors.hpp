#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace unlearnkit {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

/// Invalid sizes, out-of-range classes and other bad call arguments.
class ArgumentError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "argument"; }
};

/// Shape or structure mismatch between a model and its inputs.
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract"; }
};

/// A forget manifest that does not fit the dataset it is applied to.
class ManifestError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "manifest"; }
};

/// Non-finite losses or gradients. Carries the epoch when raised inside a training loop.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what, std::optional<int> epoch = std::nullopt)
        : Error(epoch ? what + " (epoch " + std::to_string(*epoch) + ")" : what), epoch_(epoch) {}
    const char* kind() const noexcept override { return "numeric"; }
    std::optional<int> epoch() const noexcept { return epoch_; }

private:
    std::optional<int> epoch_;
};

/// Statistic undefined for the given input (zero variance, too few rows).
class DegenerateInputError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "degenerate_input"; }
};

/// File missing, unreadable or malformed.
class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

}  // namespace unlearnkit
