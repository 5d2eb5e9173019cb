#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedtabgan {

// Base for every error the library raises. The CLI maps kinds to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class IntegrityError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class NetworkError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    NumericalError(const std::string& what, std::int64_t index)
        : Error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}

    // Layer index for optimizer failures, update step for loss failures.
    std::int64_t index() const noexcept { return index_; }

private:
    std::int64_t index_;
};

}  // namespace fedtabgan
