#pragma once

#include <stdexcept>
#include <string>

namespace visaff {

// Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Maps to CLI exit code 2.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Remote embedding service failure after retries. Maps to CLI exit code 2.
class RemoteError : public std::runtime_error {
public:
    explicit RemoteError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace visaff
