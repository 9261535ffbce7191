#pragma once

#include <stdexcept>
#include <string>

namespace meteor {

/// Invalid configuration or arguments. Maps to CLI exit code 3.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable files. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Class-attention vector with no mass on the content tokens.
class DegenerateAttention : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Loss went non-finite during training. Maps to CLI exit code 4.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::size_t step, std::string dump_path)
        : std::runtime_error(what), step_(step), dump_path_(std::move(dump_path)) {}

    std::size_t step() const noexcept { return step_; }
    const std::string& dump_path() const noexcept { return dump_path_; }

private:
    std::size_t step_;
    std::string dump_path_;
};

}  // namespace meteor
