#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace donet {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A precondition of an operation was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

// Requested allocation exceeds the addressable size.
class SizeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Missing or unreadable dataset content.
class DataError : public Error {
public:
    using Error::Error;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : DataError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// NaN/Inf during training or a failed gradient check.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace donet
