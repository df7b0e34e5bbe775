#pragma once

#include <stdexcept>
#include <string>

namespace gtgm {

enum class ErrorKind {
    config,
    dimension,
    degeneracy,
    vocabulary,
    linkage,
    format,
    io,
    numeric,
};

const char* to_string(ErrorKind kind) noexcept;

// Process exit code for an error kind: 1 validation/config, 2 IO/format, 3 numeric.
int exit_code(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        throw Error(kind, message);
    }
}

} // namespace gtgm
