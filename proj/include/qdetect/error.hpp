#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qdetect {

// Root of every error raised by the library. Subclasses name the failing
// contract so callers (and the CLI) can report which stage went wrong.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class LabelingError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

class ClassificationError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class TraceError : public Error {
public:
    using Error::Error;
};

class EquivalenceError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch)
        : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

enum class ParseErrorKind { BadMagic, VersionMismatch, Truncated, Malformed };

class ParseError : public Error {
public:
    ParseError(ParseErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
    ParseErrorKind kind() const noexcept { return kind_; }

private:
    ParseErrorKind kind_;
};

} // namespace qdetect
