#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "mmp/core.hpp"
#include "mmp/errors.hpp"
#include "mmp/families.hpp"
#include "mmp/rng.hpp"

namespace mmp {

// ---------------------------------------------------------------------------
// Pairwise absolute-difference sums on sorted samples
// ---------------------------------------------------------------------------

/// sum_{j,k} |x_j - x_k| over a sorted sample (both orders, self-pairs included).
inline double sorted_pair_abs_sum(std::span<const double> sorted) {
    const double n = static_cast<double>(sorted.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        acc += sorted[k] * (2.0 * static_cast<double>(k) + 1.0 - n);
    }
    return 2.0 * acc;
}

/// Sorted sample with prefix sums: sum_j |y - x_j| in O(log n).
class SortedSample {
public:
    explicit SortedSample(std::span<const double> values) : sorted_(values.begin(), values.end()) {
        std::sort(sorted_.begin(), sorted_.end());
        prefix_.resize(sorted_.size() + 1, 0.0);
        for (std::size_t k = 0; k < sorted_.size(); ++k) {
            prefix_[k + 1] = prefix_[k] + sorted_[k];
        }
    }

    [[nodiscard]] std::span<const double> values() const noexcept { return sorted_; }
    [[nodiscard]] std::size_t size() const noexcept { return sorted_.size(); }

    [[nodiscard]] double abs_sum(double y) const {
        const std::size_t below = count_at_most(sorted_, y);
        const double total = prefix_.back();
        const double lower = prefix_[below];
        return y * static_cast<double>(below) - lower + (total - lower) -
               y * static_cast<double>(sorted_.size() - below);
    }

    [[nodiscard]] double mean_abs(double y) const { return abs_sum(y) / static_cast<double>(sorted_.size()); }

    /// (1/n^2) sum_{j,k} |x_j - x_k|.
    [[nodiscard]] double mean_pair_abs() const {
        const double n = static_cast<double>(sorted_.size());
        return sorted_pair_abs_sum(sorted_) / (n * n);
    }

private:
    std::vector<double> sorted_;
    std::vector<double> prefix_;
};

// ---------------------------------------------------------------------------
// Energy score of a mixture predictive
// ---------------------------------------------------------------------------

/// E|y - X| for X from the mixture predictive, in closed form.
template <ParametricFamily F>
double expected_abs_distance(double y, const MixturePredictive<F>& pred) {
    const double lambda = pred.lambda();
    double value = 0.0;
    if (lambda > 0.0) {
        value += lambda * pred.family().abs_moment_integral(pred.theta(), y);
    }
    if (lambda < 1.0) {
        double s = 0.0;
        for (double a : pred.atoms()) {
            s += std::abs(y - a);
        }
        value += (1.0 - lambda) * s / static_cast<double>(pred.atoms().size());
    }
    return value;
}

/// E|X - X'| for independent draws from the mixture predictive, in closed form.
template <ParametricFamily F>
double expected_pair_distance(const MixturePredictive<F>& pred) {
    const double lambda = pred.lambda();
    double value = 0.0;
    if (lambda > 0.0) {
        value += lambda * lambda * pred.family().pair_abs_moment(pred.theta());
    }
    if (lambda > 0.0 && lambda < 1.0) {
        double cross = 0.0;
        for (double a : pred.atoms()) {
            cross += pred.family().abs_moment_integral(pred.theta(), a);
        }
        value += 2.0 * lambda * (1.0 - lambda) * cross / static_cast<double>(pred.atoms().size());
    }
    if (lambda < 1.0) {
        const double i = static_cast<double>(pred.atoms().size());
        value += (1.0 - lambda) * (1.0 - lambda) * sorted_pair_abs_sum(pred.sorted_atoms()) / (i * i);
    }
    return value;
}

/// s(y, P) = -2 E|y - X| + E|X - X'|.
template <ParametricFamily F>
double energy_score_sample(double y, const MixturePredictive<F>& pred) {
    return -2.0 * expected_abs_distance(y, pred) + expected_pair_distance(pred);
}

/// (1/v) sum_j s(y_j, P), computing E|X - X'| once.
template <ParametricFamily F>
double mean_energy_score(std::span<const double> ys, const MixturePredictive<F>& pred) {
    const double pair = expected_pair_distance(pred);
    double acc = 0.0;
    for (double y : ys) {
        acc += -2.0 * expected_abs_distance(y, pred) + pair;
    }
    return acc / static_cast<double>(ys.size());
}

/// Squared energy distance D^2(P_v, P) between the empirical law of `ys` and the predictive.
template <ParametricFamily F>
double sample_energy_distance(std::span<const double> ys, const MixturePredictive<F>& pred) {
    std::vector<double> sorted(ys.begin(), ys.end());
    std::sort(sorted.begin(), sorted.end());
    const double v = static_cast<double>(ys.size());
    return -mean_energy_score(ys, pred) - sorted_pair_abs_sum(sorted) / (v * v);
}

// ---------------------------------------------------------------------------
// Psi statistics and the closed-form weight
// ---------------------------------------------------------------------------

struct PsiStats {
    double psi_av = 0.0;  ///< mean |y_val - x_train|
    double psi_an = 0.0;  ///< mean |x - x'| over training, self-pairs included
    double psi_bv = 0.0;  ///< mean over validation of E_theta|y - X|
    double psi_bn = 0.0;  ///< mean over training of E_theta|x - X|
    double psi_cn = 0.0;  ///< E_theta|X - X'|

    /// Coefficient of lambda^2 in D^2; equals D^2(F_theta, P_train) > 0.
    [[nodiscard]] double curvature() const { return 2.0 * psi_bn - psi_an - psi_cn; }
    /// D^2 = curvature * lambda^2 - 2 * slope * lambda + K.
    [[nodiscard]] double slope() const { return psi_av - psi_an - psi_bv + psi_bn; }

    PsiStats& operator+=(const PsiStats& o) {
        psi_av += o.psi_av;
        psi_an += o.psi_an;
        psi_bv += o.psi_bv;
        psi_bn += o.psi_bn;
        psi_cn += o.psi_cn;
        return *this;
    }
    PsiStats& operator/=(double d) {
        psi_av /= d;
        psi_an /= d;
        psi_bv /= d;
        psi_bn /= d;
        psi_cn /= d;
        return *this;
    }
};

template <ParametricFamily F>
PsiStats compute_psi(const SortedSample& train, std::span<const double> validation, const F& family,
                     const typename F::Params& theta) {
    if (train.size() == 0 || validation.empty()) {
        throw InvalidInput("psi statistics need nonempty training and validation sets");
    }
    PsiStats s;
    for (double y : validation) {
        s.psi_av += train.mean_abs(y);
        s.psi_bv += family.abs_moment_integral(theta, y);
    }
    s.psi_av /= static_cast<double>(validation.size());
    s.psi_bv /= static_cast<double>(validation.size());
    s.psi_an = train.mean_pair_abs();
    for (double x : train.values()) {
        s.psi_bn += family.abs_moment_integral(theta, x);
    }
    s.psi_bn /= static_cast<double>(train.size());
    s.psi_cn = family.pair_abs_moment(theta);
    return s;
}

/// Psi statistics with theta fitted to the training set by method of moments.
template <ParametricFamily F>
PsiStats compute_psi(std::span<const double> train, std::span<const double> validation, const F& family) {
    const auto moments = MomentState::from_sample(train, F::parameter_count);
    const auto theta = family.mom_inverse(moments.moments());
    return compute_psi(SortedSample(train), validation, family, theta);
}

inline constexpr double kCurvatureTolerance = 1e-14;

/// Minimizer of the quadratic energy distance over lambda in [0, 1].
inline double closed_form_lambda(const PsiStats& psi) {
    const double den = psi.curvature();
    if (!(den > kCurvatureTolerance)) {
        throw NumericalDegeneracy("energy distance curvature " + std::to_string(den) + " is not positive");
    }
    return std::clamp(psi.slope() / den, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Quadratic structure check
// ---------------------------------------------------------------------------

struct QuadraticCheck {
    double a = 0.0;  ///< lambda^2 coefficient
    double b = 0.0;  ///< lambda coefficient
    double k = 0.0;  ///< constant
    double max_fit_residual = 0.0;
    double max_holdout_residual = 0.0;
};

/// Fits D^2(lambda) = a lambda^2 + b lambda + k through sample energy distances
/// evaluated directly at `fit_lambdas`, and reports the prediction residual at
/// `holdout_lambdas`.
template <ParametricFamily F>
QuadraticCheck quadratic_check(std::span<const double> train, std::span<const double> validation, const F& family,
                               std::span<const double> fit_lambdas, std::span<const double> holdout_lambdas) {
    if (fit_lambdas.size() < 3) {
        throw InvalidInput("quadratic fit needs at least three lambda values");
    }
    const auto moments = MomentState::from_sample(train, F::parameter_count);
    const auto theta = family.mom_inverse(moments.moments());
    const std::vector<double> atoms(train.begin(), train.end());
    auto distance = [&](double lambda) {
        return sample_energy_distance(validation, MixturePredictive<F>(family, theta, atoms, lambda));
    };
    const auto m = static_cast<Eigen::Index>(fit_lambdas.size());
    Eigen::MatrixXd design(m, 3);
    Eigen::VectorXd target(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        const double l = fit_lambdas[static_cast<std::size_t>(r)];
        design(r, 0) = l * l;
        design(r, 1) = l;
        design(r, 2) = 1.0;
        target(r) = distance(l);
    }
    const Eigen::Vector3d coef = design.colPivHouseholderQr().solve(target);
    QuadraticCheck out{coef(0), coef(1), coef(2), 0.0, 0.0};
    out.max_fit_residual = (design * coef - target).cwiseAbs().maxCoeff();
    for (double l : holdout_lambdas) {
        const double pred = coef(0) * l * l + coef(1) * l + coef(2);
        out.max_holdout_residual = std::max(out.max_holdout_residual, std::abs(pred - distance(l)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selection of c
// ---------------------------------------------------------------------------

struct Holdout {
    double validation_fraction = 0.5;
};
struct KFold {
    std::size_t folds = 5;
};
struct LeaveOneOut {};

using SelectionScheme = std::variant<Holdout, KFold, LeaveOneOut>;

struct ScorePoint {
    double c;
    double score;  ///< cross-validated energy score relative to c = 0
};

struct SelectionResult {
    double lambda_hat = 0.0;
    Concentration c_hat;
    PsiStats psi;  ///< fold-averaged statistics
    std::vector<ScorePoint> score_curve;
};

/// Validation index sets for a scheme; folds derive from RngStream(seed, 0).
inline std::vector<std::vector<std::size_t>> make_folds(std::size_t n, const SelectionScheme& scheme,
                                                        std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> folds;
    if (std::holds_alternative<LeaveOneOut>(scheme)) {
        for (std::size_t j = 0; j < n; ++j) {
            folds.push_back({j});
        }
        return folds;
    }
    RngStream rng(seed, 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    if (const auto* h = std::get_if<Holdout>(&scheme)) {
        if (!(h->validation_fraction > 0.0 && h->validation_fraction < 1.0)) {
            throw InvalidInput("holdout fraction must lie in (0,1)");
        }
        auto v = static_cast<std::size_t>(std::llround(h->validation_fraction * static_cast<double>(n)));
        v = std::clamp<std::size_t>(v, 1, n - 1);
        folds.emplace_back(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(v));
        return folds;
    }
    const std::size_t j = std::get<KFold>(scheme).folds;
    if (j < 2 || j > n) {
        throw InvalidInput("k-fold needs 2 <= J <= n");
    }
    folds.resize(j);
    for (std::size_t k = 0; k < n; ++k) {
        folds[k % j].push_back(perm[k]);
    }
    return folds;
}

/// Log-spaced plotting grid {0, 10^0 .. 10^6, +inf}, 50 points in total.
inline std::vector<double> default_score_grid() {
    std::vector<double> grid{0.0};
    constexpr int interior = 48;
    for (int k = 0; k < interior; ++k) {
        grid.push_back(std::pow(10.0, 6.0 * k / (interior - 1)));
    }
    grid.push_back(kInf);
    return grid;
}

/// Relative cross-validated score at c: -(a lambda^2 - 2 b lambda) with lambda = c/(c+n).
inline double relative_score(const PsiStats& psi, double c, double n) {
    const double lambda = Concentration(c).weight(n);
    return -(psi.curvature() * lambda * lambda - 2.0 * psi.slope() * lambda);
}

/// Averages the Psi statistics across splits (theta refit per training fold),
/// takes the clipped closed-form weight and inverts it with the full-data n.
template <ParametricFamily F>
SelectionResult select_c(const Dataset& data, const F& family, const SelectionScheme& scheme, std::uint64_t seed = 0) {
    const std::size_t n = data.size();
    const auto folds = make_folds(n, scheme, seed);
    std::vector<char> held(n, 0);
    PsiStats total;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::fill(held.begin(), held.end(), 0);
        std::vector<double> validation;
        for (std::size_t j : folds[f]) {
            held[j] = 1;
            validation.push_back(data[j]);
        }
        std::vector<double> train;
        for (std::size_t j = 0; j < n; ++j) {
            if (!held[j]) {
                train.push_back(data[j]);
            }
        }
        if (train.size() < F::parameter_count + 1) {
            throw InvalidInput("fold " + std::to_string(f) + " has too few training points");
        }
        try {
            total += compute_psi(std::span<const double>(train), std::span<const double>(validation), family);
        } catch (const DegenerateMoments& e) {
            throw DegenerateMoments("fold " + std::to_string(f) + ": " + e.what());
        }
    }
    total /= static_cast<double>(folds.size());

    SelectionResult result;
    result.psi = total;
    result.lambda_hat = closed_form_lambda(total);
    result.c_hat = Concentration::from_weight(result.lambda_hat, static_cast<double>(n));

    // The clipped optimum of a convex quadratic dominates both endpoints.
    const double at_hat = -(total.curvature() * result.lambda_hat * result.lambda_hat -
                            2.0 * total.slope() * result.lambda_hat);
    const double at_one = -(total.curvature() - 2.0 * total.slope());
    const double slack = 1e-12 * (std::abs(at_one) + total.curvature());
    if (at_hat < -slack || at_hat < at_one - slack) {
        throw NumericalDegeneracy("selected weight does not dominate the pure components");
    }

    auto grid = default_score_grid();
    if (!result.c_hat.is_infinite() && std::find(grid.begin(), grid.end(), result.c_hat.value()) == grid.end()) {
        grid.insert(std::upper_bound(grid.begin(), grid.end(), result.c_hat.value()), result.c_hat.value());
    }
    for (double c : grid) {
        result.score_curve.push_back({c, relative_score(total, c, static_cast<double>(n))});
    }
    return result;
}

} // namespace mmp
