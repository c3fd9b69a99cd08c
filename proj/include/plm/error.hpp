#pragma once

#include <stdexcept>
#include <string>

namespace plm {

enum class ErrorKind {
    config,   // invalid or unknown configuration
    data,     // missing, corrupt or unusable input files / stages
    numeric,  // divergence (NaN/Inf loss)
    shape,    // tensor shape mismatch
    usage,    // precondition violated by the caller
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

// Process exit code for an error category (0 is success, 1 unexpected).
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::numeric: return 4;
        case ErrorKind::shape: return 5;
        case ErrorKind::usage: return 6;
    }
    return 1;
}

}  // namespace plm
