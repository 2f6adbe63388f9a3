#pragma once

// Error hierarchy. Every error carries the process exit code the CLI maps it
// to: 1 usage/config, 2 data, 3 transport, 4 numeric.

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nlecal {

enum class ExitCode : int { ok = 0, usage = 1, data = 2, transport = 3, numeric = 4 };

class Error : public std::runtime_error {
public:
    Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
    ExitCode exit_code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(what, ExitCode::usage) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what, ExitCode::usage) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what, ExitCode::data) {}
};

class ParseError : public DataError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public DataError {
public:
    explicit ValidationError(const std::string& what) : DataError(what) {}
};

class TransportError : public Error {
public:
    TransportError(const std::string& what, std::size_t partial = 0)
        : Error(what, ExitCode::transport), partial_(partial) {}
    // Number of results completed before the failure.
    std::size_t partial_results() const noexcept { return partial_; }

private:
    std::size_t partial_;
};

class EndpointError : public TransportError {
public:
    EndpointError(const std::string& what, int status, std::size_t partial = 0)
        : TransportError(what + " (HTTP " + std::to_string(status) + ")", partial), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

class ProtocolError : public TransportError {
public:
    explicit ProtocolError(const std::string& what) : TransportError(what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what, ExitCode::numeric) {}
};

}  // namespace nlecal
