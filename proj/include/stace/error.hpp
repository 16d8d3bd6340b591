#pragma once

#include <stdexcept>
#include <string>

namespace stace {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Violated precondition or malformed argument.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Unreadable or malformed file. `kind` distinguishes the failure for callers
/// that need to branch on it (bad magic vs truncation vs overflow).
class ParseError : public Error {
public:
    enum class Kind { BadMagic, Truncated, DimOverflow, ShapeMismatch, Syntax };

    ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class TrainingDiverged : public Error {
public:
    explicit TrainingDiverged(std::size_t step)
        : Error("training diverged: non-finite loss at step " + std::to_string(step)), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

class DegenerateCav : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was run before the stage it depends on.
class MissingStage : public Error {
public:
    explicit MissingStage(std::string stage)
        : Error("missing artifacts of stage '" + stage + "'; run `stace " + stage + "` first"),
          stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

}  // namespace detail

}  // namespace stace
