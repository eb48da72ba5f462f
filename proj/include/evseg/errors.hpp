#pragma once

#include <stdexcept>
#include <string>

namespace evseg {

// Base class for everything this library throws on purpose. Callers that
// want a single catch site can use this; the CLI maps each subclass to a
// distinct process exit code.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem-level failure: could not open, read or write a file.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// The bytes were readable but do not form a valid file of the expected
// kind, or in-memory data violates a container invariant (e.g. NaN voxels).
class FormatError : public Error {
public:
    enum class Fault {
        BadMagic,
        BadVersion,
        Truncated,
        TrailingBytes,
        NonFinite,
        LabelRange,
        Malformed,
    };

    FormatError(Fault fault, const std::string& msg) : Error(msg), fault_(fault) {}
    Fault fault() const { return fault_; }

private:
    Fault fault_;
};

// Operands whose grid dimensions or channel counts do not line up.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A mathematical function was evaluated outside its domain, or numeric
// input violates a documented precondition (negative evidence, alpha < 1).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// A configuration file or programmatic config struct is inconsistent.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace evseg
