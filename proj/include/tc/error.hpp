#pragma once

#include <stdexcept>
#include <string>

namespace tc {

// Error taxonomy shared by every module. The CLI maps UsageError to exit
// code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller handed in malformed data (bad token id, empty sequence, wrong length).
class InputError : public Error {
public:
    using Error::Error;
};

/// Incompatible dimensions or hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Checkpoint / corpus file could not be decoded.
class FormatError : public Error {
public:
    using Error::Error;
};

/// API contract violated by the caller (layer ordering, causality, mixed roots).
class UsageError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

} // namespace tc
