// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace roimatch {

// Error kinds map 1:1 onto CLI exit codes (see tools/).
enum class ErrorKind { usage = 2, io = 3, config = 4, numeric = 5 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& m) : Error(ErrorKind::usage, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
// Degenerate or invalid geometry (zero area/perimeter, self-intersection, ...).
struct GeometryError : Error {
    explicit GeometryError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};

}  // namespace roimatch
