#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmp/core.hpp"
#include "mmp/errors.hpp"
#include "mmp/rng.hpp"

namespace mmp {

/// Variance floor below which the normal method-of-moments inverse refuses to fit.
inline constexpr double kDegenerateVariance = 1e-12;

inline double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double standard_normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Normal
// ---------------------------------------------------------------------------

struct NormalParams {
    double mean = 0.0;
    double variance = 1.0;

    friend bool operator==(const NormalParams&, const NormalParams&) = default;
};

/// Normal family parameterized by (mean, variance); p = 2.
struct NormalFamily {
    using Params = NormalParams;
    static constexpr std::size_t parameter_count = 2;

    /// h(mu1, mu2) = (mu1, mu2 - mu1^2).
    [[nodiscard]] Params mom_inverse(std::span<const double> moments) const {
        if (moments.size() < 2) {
            throw InvalidInput("normal method of moments needs two moments");
        }
        const double mean = moments[0];
        const double variance = moments[1] - mean * mean;
        if (!(variance > kDegenerateVariance)) {
            throw DegenerateMoments("normal method of moments: variance " + std::to_string(variance) +
                                    " is not above the degeneracy floor");
        }
        return {mean, variance};
    }

    [[nodiscard]] std::vector<double> moments_from_theta(const Params& theta) const {
        return {raw_moment(theta, 1), raw_moment(theta, 2)};
    }

    /// Non-central moments E[X^k], k = 1..4.
    [[nodiscard]] double raw_moment(const Params& theta, int k) const {
        const double m = theta.mean;
        const double v = theta.variance;
        switch (k) {
        case 1:
            return m;
        case 2:
            return m * m + v;
        case 3:
            return m * m * m + 3.0 * m * v;
        case 4:
            return m * m * m * m + 6.0 * m * m * v + 3.0 * v * v;
        default:
            throw UnsupportedMoment("normal raw moment of order " + std::to_string(k) + " is not provided");
        }
    }

    [[nodiscard]] double cdf(const Params& theta, double y) const {
        return standard_normal_cdf((y - theta.mean) / std::sqrt(theta.variance));
    }

    [[nodiscard]] double pdf(const Params& theta, double y) const {
        const double sd = std::sqrt(theta.variance);
        return standard_normal_pdf((y - theta.mean) / sd) / sd;
    }

    double sample(const Params& theta, RngStream& rng) const {
        return theta.mean + std::sqrt(theta.variance) * rng.normal();
    }

    /// E|X - a| (folded normal): sd*sqrt(2/pi)*exp(-d^2/2) + (a - mean)(2 Phi(d) - 1).
    [[nodiscard]] double abs_moment_integral(const Params& theta, double a) const {
        const double sd = std::sqrt(theta.variance);
        const double diff = a - theta.mean;
        const double d = diff / sd;
        return sd * std::sqrt(2.0 / std::numbers::pi) * std::exp(-0.5 * d * d) +
               diff * std::erf(d / std::numbers::sqrt2);
    }

    /// E|X - X'| for independent copies: 2 sd / sqrt(pi).
    [[nodiscard]] double pair_abs_moment(const Params& theta) const {
        return 2.0 * std::sqrt(theta.variance) / std::sqrt(std::numbers::pi);
    }

    [[nodiscard]] double mean(const Params& theta) const { return theta.mean; }
    [[nodiscard]] double std_dev(const Params& theta) const { return std::sqrt(theta.variance); }
    [[nodiscard]] double skewness(const Params&) const { return 0.0; }
    [[nodiscard]] double kurtosis(const Params&) const { return 3.0; }
    [[nodiscard]] std::vector<double> to_vector(const Params& theta) const { return {theta.mean, theta.variance}; }

    /// Score-update step theta + step * I(theta)^{-1} s(y, theta) for (mean, variance).
    [[nodiscard]] Params score_step(const Params& theta, double y, double step) const {
        if (!(theta.variance > kDegenerateVariance)) {
            throw NumericalDegeneracy("normal Fisher information is singular at variance " +
                                      std::to_string(theta.variance));
        }
        const double r = y - theta.mean;
        return {theta.mean + step * r, theta.variance + step * (r * r - theta.variance)};
    }
};

/// Convenience wrappers named after the operations they implement.
inline NormalParams normal_mom_inverse(double mu1, double mu2) {
    const double m[2] = {mu1, mu2};
    return NormalFamily{}.mom_inverse(m);
}

inline double normal_abs_moment_integral(const NormalParams& theta, double a) {
    return NormalFamily{}.abs_moment_integral(theta, a);
}

inline double normal_pair_abs_moment(const NormalParams& theta) { return NormalFamily{}.pair_abs_moment(theta); }

inline double normal_higher_moment(const NormalParams& theta, int k) {
    if (k != 3 && k != 4) {
        throw UnsupportedMoment("normal_higher_moment supports k = 3 or 4, got " + std::to_string(k));
    }
    return NormalFamily{}.raw_moment(theta, k);
}

static_assert(ParametricFamily<NormalFamily>);

// ---------------------------------------------------------------------------
// Skew normal (data generation only)
// ---------------------------------------------------------------------------

struct SkewNormalParams {
    double xi = 0.0;
    double omega = 1.0;
    double alpha = 0.0;

    void validate() const {
        if (!(omega > 0.0) || !std::isfinite(xi) || !std::isfinite(alpha)) {
            throw InvalidInput("skew normal needs finite location/slant and omega > 0");
        }
    }
};

/// xi + omega * (delta |U0| + sqrt(1 - delta^2) U1), delta = alpha / sqrt(1 + alpha^2).
inline double skewnormal_sample(const SkewNormalParams& params, RngStream& rng) {
    const double delta = params.alpha / std::sqrt(1.0 + params.alpha * params.alpha);
    const double u0 = rng.normal();
    const double u1 = rng.normal();
    const double z = delta * std::abs(u0) + std::sqrt(1.0 - delta * delta) * u1;
    return params.xi + params.omega * z;
}

// ---------------------------------------------------------------------------
// Logistic GLM conditional law
// ---------------------------------------------------------------------------

/// Numerically stable 1 / (1 + exp(-eta)).
inline double inverse_logit(double eta) {
    if (eta >= 0.0) {
        return 1.0 / (1.0 + std::exp(-eta));
    }
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

struct BernoulliLaw {
    double probability;
    [[nodiscard]] double mean() const { return probability; }
    [[nodiscard]] double variance() const { return probability * (1.0 - probability); }
    static constexpr double dispersion = 1.0;
};

/// Conditional law of Y | x under the canonical logit link.
inline BernoulliLaw logistic_family(std::span<const double> x, std::span<const double> beta) {
    if (x.size() != beta.size()) {
        throw InvalidInput("covariate and coefficient dimensions differ");
    }
    double eta = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        eta += x[k] * beta[k];
    }
    return {inverse_logit(eta)};
}

} // namespace mmp
