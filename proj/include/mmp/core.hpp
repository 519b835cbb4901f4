#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmp/errors.hpp"
#include "mmp/rng.hpp"

namespace mmp {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Observed univariate sample y_1..y_n. Nonempty, every value finite.
class Dataset {
public:
    explicit Dataset(std::vector<double> values) : values_(std::move(values)) {
        if (values_.empty()) {
            throw InvalidInput("dataset must contain at least one observation");
        }
        for (std::size_t j = 0; j < values_.size(); ++j) {
            if (!std::isfinite(values_[j])) {
                throw InvalidInput("dataset value " + std::to_string(j) + " is not finite");
            }
        }
    }

    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] double operator[](std::size_t j) const { return values_[j]; }

private:
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// MomentState
// ---------------------------------------------------------------------------

/// Running raw moments mu^(1..order) of a sample of size count(), stored as means.
class MomentState {
public:
    MomentState(std::vector<double> moments, std::size_t count)
        : moments_(std::move(moments)), count_(count) {
        if (moments_.empty()) {
            throw InvalidInput("moment state needs at least one moment");
        }
        if (count_ == 0) {
            throw InvalidInput("moment state needs a positive count");
        }
    }

    static MomentState from_sample(std::span<const double> ys, std::size_t order) {
        if (ys.empty()) {
            throw InvalidInput("cannot form moments of an empty sample");
        }
        std::vector<double> m(order, 0.0);
        for (double y : ys) {
            double pw = 1.0;
            for (std::size_t k = 0; k < order; ++k) {
                pw *= y;
                m[k] += pw;
            }
        }
        for (double& v : m) {
            v /= static_cast<double>(ys.size());
        }
        return MomentState(std::move(m), ys.size());
    }

    /// mu^(k) <- i/(i+1) mu^(k) + y^k/(i+1), i <- i+1.
    void update(double y) {
        if (!std::isfinite(y)) {
            throw InvalidInput("moment update rejected a non-finite observation");
        }
        const double step = 1.0 / static_cast<double>(count_ + 1);
        double pw = 1.0;
        for (double& m : moments_) {
            pw *= y;
            m += (pw - m) * step;
        }
        ++count_;
    }

    [[nodiscard]] std::span<const double> moments() const noexcept { return moments_; }
    /// 1-based raw moment accessor.
    [[nodiscard]] double moment(std::size_t k) const { return moments_.at(k - 1); }
    [[nodiscard]] std::size_t order() const noexcept { return moments_.size(); }
    [[nodiscard]] std::size_t count() const noexcept { return count_; }

    /// Even moments nonnegative and mu2 >= mu1^2, up to a relative slack.
    [[nodiscard]] bool is_consistent(double rel_tol = 1e-12) const noexcept {
        for (std::size_t k = 2; k <= moments_.size(); k += 2) {
            if (moments_[k - 1] < 0.0) {
                return false;
            }
        }
        if (moments_.size() >= 2) {
            const double m1 = moments_[0];
            const double m2 = moments_[1];
            if (m2 - m1 * m1 < -rel_tol * std::max(1.0, m2)) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const MomentState&, const MomentState&) = default;

private:
    std::vector<double> moments_;
    std::size_t count_;
};

inline MomentState moment_update(MomentState state, double y) {
    state.update(y);
    return state;
}

// ---------------------------------------------------------------------------
// Concentration
// ---------------------------------------------------------------------------

/// Mixing hyperparameter c in [0, +inf]; weight(i) = c / (c + i).
class Concentration {
public:
    constexpr Concentration() = default;

    explicit Concentration(double c) : c_(c) {
        if (std::isnan(c) || c < 0.0) {
            throw InvalidInput("concentration must be a nonnegative number or +inf");
        }
    }

    static Concentration infinite() { return Concentration(kInf); }

    /// Inverts lambda = c / (c + n).
    static Concentration from_weight(double lambda, double n) {
        if (!(lambda >= 0.0 && lambda <= 1.0)) {
            throw InvalidInput("mixture weight must lie in [0,1]");
        }
        if (lambda == 1.0) {
            return infinite();
        }
        return Concentration(lambda * n / (1.0 - lambda));
    }

    [[nodiscard]] double value() const noexcept { return c_; }
    [[nodiscard]] bool is_infinite() const noexcept { return std::isinf(c_); }

    [[nodiscard]] double weight(double i) const noexcept {
        if (std::isinf(c_)) {
            return 1.0;
        }
        if (c_ == 0.0) {
            return 0.0;
        }
        return c_ / (c_ + i);
    }

    [[nodiscard]] std::string to_string() const {
        if (is_infinite()) {
            return "inf";
        }
        std::string s = std::to_string(c_);
        return s;
    }

    friend bool operator==(const Concentration&, const Concentration&) = default;

private:
    double c_ = 0.0;
};

// ---------------------------------------------------------------------------
// Parametric family contract
// ---------------------------------------------------------------------------

template <class F>
concept ParametricFamily = requires(const F& f, const typename F::Params& theta,
                                    std::span<const double> moments, double y, RngStream& rng) {
    typename F::Params;
    { F::parameter_count } -> std::convertible_to<std::size_t>;
    { f.mom_inverse(moments) } -> std::same_as<typename F::Params>;
    { f.moments_from_theta(theta) } -> std::convertible_to<std::vector<double>>;
    { f.raw_moment(theta, 1) } -> std::convertible_to<double>;
    { f.cdf(theta, y) } -> std::convertible_to<double>;
    { f.sample(theta, rng) } -> std::convertible_to<double>;
    { f.abs_moment_integral(theta, y) } -> std::convertible_to<double>;
    { f.pair_abs_moment(theta) } -> std::convertible_to<double>;
    { f.mean(theta) } -> std::convertible_to<double>;
    { f.std_dev(theta) } -> std::convertible_to<double>;
    { f.skewness(theta) } -> std::convertible_to<double>;
    { f.kurtosis(theta) } -> std::convertible_to<double>;
    { f.to_vector(theta) } -> std::convertible_to<std::vector<double>>;
};

// ---------------------------------------------------------------------------
// Mixture sampling (shared by the predictive snapshot and the trajectory loops)
// ---------------------------------------------------------------------------

/// Pure Bayesian-bootstrap (Polya urn) draw: one uniform picks an atom.
inline double sample_empirical(std::span<const double> atoms, RngStream& rng) {
    return atoms[RngStream::scale_index(rng.uniform(), atoms.size())];
}

/// One uniform u decides the branch: parametric iff u < lambda; otherwise u is
/// rescaled onto the atoms. With lambda == 0 this is exactly sample_empirical.
template <ParametricFamily F>
double sample_mixture(const F& family, const typename F::Params& theta,
                      std::span<const double> atoms, double lambda, RngStream& rng) {
    const double u = rng.uniform();
    if (u < lambda) {
        return family.sample(theta, rng);
    }
    const double v = (u - lambda) / (1.0 - lambda);
    return atoms[RngStream::scale_index(v, atoms.size())];
}

// ---------------------------------------------------------------------------
// Empirical helpers
// ---------------------------------------------------------------------------

/// #{atoms <= y} for sorted atoms.
inline std::size_t count_at_most(std::span<const double> sorted, double y) {
    return static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), y) - sorted.begin());
}

/// Generalized inverse of the ECDF: smallest atom a with #{<= a}/n >= q.
inline double empirical_quantile(std::span<const double> sorted, double q) {
    if (sorted.empty()) {
        throw InvalidInput("quantile of an empty sample");
    }
    const std::size_t n = sorted.size();
    const double nd = static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(q * nd));
    k = std::clamp<std::size_t>(k, 1, n);
    while (k > 1 && static_cast<double>(k - 1) / nd >= q) {
        --k;
    }
    while (k < n && static_cast<double>(k) / nd < q) {
        ++k;
    }
    return sorted[k - 1];
}

// ---------------------------------------------------------------------------
// MixturePredictive
// ---------------------------------------------------------------------------

/// Frozen predictive lambda * F_theta + (1 - lambda) * empirical(atoms).
template <ParametricFamily F>
class MixturePredictive {
public:
    using Params = typename F::Params;

    static constexpr double kQuantileTolerance = 1e-9;

    MixturePredictive(F family, Params theta, std::vector<double> atoms, double lambda)
        : family_(std::move(family)), theta_(std::move(theta)), atoms_(std::move(atoms)), lambda_(lambda) {
        if (!(lambda_ >= 0.0 && lambda_ <= 1.0)) {
            throw InvalidInput("mixture weight must lie in [0,1]");
        }
        if (atoms_.empty() && lambda_ < 1.0) {
            throw InvalidInput("empirical component needs at least one atom");
        }
        sorted_ = atoms_;
        std::sort(sorted_.begin(), sorted_.end());
    }

    [[nodiscard]] const F& family() const noexcept { return family_; }
    [[nodiscard]] const Params& theta() const noexcept { return theta_; }
    [[nodiscard]] double lambda() const noexcept { return lambda_; }
    [[nodiscard]] std::span<const double> atoms() const noexcept { return atoms_; }
    [[nodiscard]] std::span<const double> sorted_atoms() const noexcept { return sorted_; }

    double sample(RngStream& rng) const { return sample_mixture(family_, theta_, atoms_, lambda_, rng); }

    [[nodiscard]] double cdf(double y) const {
        double value = 0.0;
        if (lambda_ > 0.0) {
            value += lambda_ * family_.cdf(theta_, y);
        }
        if (lambda_ < 1.0) {
            value += (1.0 - lambda_) * static_cast<double>(count_at_most(sorted_, y)) /
                     static_cast<double>(sorted_.size());
        }
        return value;
    }

    /// inf{y : cdf(y) >= q} by bracketing and bisection; atom jumps are returned exactly.
    [[nodiscard]] double quantile(double q) const {
        if (!(q > 0.0 && q < 1.0)) {
            throw InvalidInput("quantile level must lie in (0,1)");
        }
        if (lambda_ == 0.0) {
            return empirical_quantile(sorted_, q);
        }
        const double spread = 10.0 * family_.std_dev(theta_);
        double lo = sorted_.empty() ? family_.mean(theta_) - spread : std::min(sorted_.front(), family_.mean(theta_)) - spread;
        double hi = sorted_.empty() ? family_.mean(theta_) + spread : std::max(sorted_.back(), family_.mean(theta_)) + spread;
        double width = std::max(hi - lo, 1.0);
        while (cdf(lo) >= q) {
            lo -= width;
            width *= 2.0;
        }
        width = std::max(hi - lo, 1.0);
        while (cdf(hi) < q) {
            hi += width;
            width *= 2.0;
        }
        // Invariant: cdf(lo) < q <= cdf(hi).
        while (hi - lo > kQuantileTolerance) {
            const double mid = lo + 0.5 * (hi - lo);
            if (mid <= lo || mid >= hi) {
                break;
            }
            if (cdf(mid) >= q) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if (lambda_ < 1.0) {
            auto it = std::upper_bound(sorted_.begin(), sorted_.end(), lo);
            if (it != sorted_.end() && *it <= hi && cdf(*it) >= q) {
                return *it;
            }
        }
        return hi;
    }

private:
    F family_;
    Params theta_;
    std::vector<double> atoms_;
    std::vector<double> sorted_;
    double lambda_;
};

template <ParametricFamily F>
double mixture_sample(const MixturePredictive<F>& pred, RngStream& rng) {
    return pred.sample(rng);
}

template <ParametricFamily F>
double mixture_cdf(const MixturePredictive<F>& pred, double y) {
    return pred.cdf(y);
}

template <ParametricFamily F>
double mixture_quantile(const MixturePredictive<F>& pred, double q) {
    return pred.quantile(q);
}

} // namespace mmp
