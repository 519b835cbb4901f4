#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input rejected before any computation (non-finite value, empty sample, bad shape).
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Method-of-moments inverse hit a (near) degenerate moment vector.
class DegenerateMoments : public Error {
public:
    using Error::Error;
};

/// A closed form became numerically meaningless (zero denominator, singular matrix).
class NumericalDegeneracy : public Error {
public:
    using Error::Error;
};

/// Requested moment order is not provided by the family.
class UnsupportedMoment : public Error {
public:
    using Error::Error;
};

/// Logistic MLE does not exist because the responses are separable.
class SeparationError : public NumericalDegeneracy {
public:
    using NumericalDegeneracy::NumericalDegeneracy;
};

/// Design matrix is not of full column rank.
class RankDeficient : public NumericalDegeneracy {
public:
    using NumericalDegeneracy::NumericalDegeneracy;
};

/// Conditional mean requested at an atom that has never been observed.
class UndefinedConditional : public Error {
public:
    using Error::Error;
};

/// Data file could not be interpreted (parse failure, non-binary target, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// A single predictive-resampling trajectory failed mid-way.
class TrajectoryAborted : public Error {
public:
    TrajectoryAborted(std::size_t replicate, std::size_t step, const std::string& why)
        : Error("replicate " + std::to_string(replicate) + " aborted at step " +
                std::to_string(step) + ": " + why),
          replicate_(replicate),
          step_(step) {}

    [[nodiscard]] std::size_t replicate() const noexcept { return replicate_; }
    [[nodiscard]] std::size_t step() const noexcept { return step_; }

private:
    std::size_t replicate_;
    std::size_t step_;
};

} // namespace mmp
