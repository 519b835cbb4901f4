#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mmp/core.hpp"
#include "mmp/energy.hpp"
#include "mmp/errors.hpp"
#include "mmp/families.hpp"
#include "mmp/parallel.hpp"
#include "mmp/resampling.hpp"
#include "mmp/rng.hpp"

namespace mmp {

enum class Link { Logit, Identity };

inline double inverse_link(Link link, double eta) { return link == Link::Logit ? inverse_logit(eta) : eta; }

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Design matrix with a leading intercept column, and responses.
class RegressionDataset {
public:
    RegressionDataset(Eigen::MatrixXd x, Eigen::VectorXd y) : x_(std::move(x)), y_(std::move(y)) {
        if (x_.rows() == 0 || x_.cols() == 0) {
            throw InvalidInput("empty design matrix");
        }
        if (x_.rows() != y_.size()) {
            throw InvalidInput("design rows and response length differ");
        }
        if (!x_.allFinite() || !y_.allFinite()) {
            throw InvalidInput("regression data must be finite");
        }
        if ((x_.col(0).array() != 1.0).any()) {
            throw InvalidInput("first design column must be the all-ones intercept");
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x_);
        if (qr.rank() < x_.cols()) {
            throw RankDeficient("design matrix has rank " + std::to_string(qr.rank()) + " < " +
                                std::to_string(x_.cols()) + " columns");
        }
    }

    /// Prepends the intercept column to `features`.
    static RegressionDataset with_intercept(const Eigen::MatrixXd& features, Eigen::VectorXd y) {
        Eigen::MatrixXd x(features.rows(), features.cols() + 1);
        x.col(0).setOnes();
        x.rightCols(features.cols()) = features;
        return RegressionDataset(std::move(x), std::move(y));
    }

    [[nodiscard]] const Eigen::MatrixXd& x() const noexcept { return x_; }
    [[nodiscard]] const Eigen::VectorXd& y() const noexcept { return y_; }
    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(x_.rows()); }
    [[nodiscard]] std::size_t dim() const noexcept { return static_cast<std::size_t>(x_.cols()); }
    /// Covariate dimension excluding the intercept (at least 1).
    [[nodiscard]] std::size_t covariate_dim() const noexcept {
        return std::max<std::size_t>(1, static_cast<std::size_t>(x_.cols()) - 1);
    }

    [[nodiscard]] RegressionDataset subset(std::span<const std::size_t> rows) const {
        Eigen::MatrixXd xs(static_cast<Eigen::Index>(rows.size()), x_.cols());
        Eigen::VectorXd ys(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            xs.row(static_cast<Eigen::Index>(r)) = x_.row(static_cast<Eigen::Index>(rows[r]));
            ys(static_cast<Eigen::Index>(r)) = y_(static_cast<Eigen::Index>(rows[r]));
        }
        return RegressionDataset(std::move(xs), std::move(ys));
    }

    [[nodiscard]] bool is_binary() const {
        return (y_.array() == 0.0 || y_.array() == 1.0).all();
    }

private:
    Eigen::MatrixXd x_;
    Eigen::VectorXd y_;
};

struct Standardization {
    Eigen::VectorXd mean;  ///< per non-intercept column
    Eigen::VectorXd sd;

    [[nodiscard]] RegressionDataset apply(const RegressionDataset& data) const {
        Eigen::MatrixXd x = data.x();
        for (Eigen::Index k = 1; k < x.cols(); ++k) {
            x.col(k) = (x.col(k).array() - mean(k - 1)) / sd(k - 1);
        }
        return RegressionDataset(std::move(x), data.y());
    }
};

/// Column means and population standard deviations of the non-intercept columns.
inline Standardization fit_standardization(const RegressionDataset& data) {
    const auto& x = data.x();
    const Eigen::Index p = x.cols() - 1;
    Standardization s{Eigen::VectorXd(p), Eigen::VectorXd(p)};
    for (Eigen::Index k = 0; k < p; ++k) {
        const auto col = x.col(k + 1).array();
        s.mean(k) = col.mean();
        s.sd(k) = std::sqrt((col - s.mean(k)).square().mean());
        if (!(s.sd(k) > 0.0)) {
            throw RankDeficient("covariate column " + std::to_string(k + 1) + " is constant");
        }
    }
    return s;
}

inline RegressionDataset standardize(const RegressionDataset& data) { return fit_standardization(data).apply(data); }

/// Synthetic linear-logistic data: x ~ N(0, I_p), y ~ Bernoulli(logit^{-1}(x' beta)), beta including intercept.
inline RegressionDataset simulate_logistic_data(std::size_t n, const Eigen::VectorXd& beta, RngStream& rng) {
    if (n == 0 || beta.size() < 2) {
        throw InvalidInput("synthetic logistic data needs n > 0 and at least one covariate");
    }
    const Eigen::Index p = beta.size() - 1;
    Eigen::MatrixXd features(static_cast<Eigen::Index>(n), p);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
        for (Eigen::Index k = 0; k < p; ++k) {
            features(r, k) = rng.normal();
        }
        const double eta = beta(0) + features.row(r).dot(beta.tail(p));
        y(r) = rng.uniform() < inverse_logit(eta) ? 1.0 : 0.0;
    }
    return RegressionDataset::with_intercept(features, std::move(y));
}

/// Coefficients (intercept first) alternating in sign with decaying magnitude.
inline Eigen::VectorXd default_logistic_coefficients(std::size_t p) {
    Eigen::VectorXd beta(static_cast<Eigen::Index>(p) + 1);
    beta(0) = -0.5;
    for (std::size_t k = 1; k <= p; ++k) {
        beta(static_cast<Eigen::Index>(k)) = (k % 2 == 1 ? 1.0 : -1.0) / std::sqrt(static_cast<double>(k));
    }
    return beta;
}

// ---------------------------------------------------------------------------
// Cross-moment matching fits
// ---------------------------------------------------------------------------

/// max_k |(1/n) sum_j (g^{-1}(x_j' beta) - y_j) x_jk|.
inline double cross_moment_residual(const RegressionDataset& data, const Eigen::VectorXd& beta, Link link) {
    const Eigen::VectorXd eta = data.x() * beta;
    Eigen::VectorXd r(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j) {
        r(j) = inverse_link(link, eta(j)) - data.y()(j);
    }
    return (data.x().transpose() * r / static_cast<double>(data.size())).cwiseAbs().maxCoeff();
}

inline constexpr double kMleGradientTolerance = 1e-10;

/// Logistic MLE by Newton-Raphson / IRLS. The canonical-link MLE satisfies the
/// cross-moment condition (1/n) sum g^{-1}(x_j' beta) x_j = (1/n) sum y_j x_j.
inline Eigen::VectorXd fit_mle_logistic(const RegressionDataset& data, int max_iterations = 100) {
    if (!data.is_binary()) {
        throw DataError("logistic regression needs responses in {0,1}");
    }
    const auto& x = data.x();
    const auto& y = data.y();
    const double n = static_cast<double>(data.size());
    if (y.minCoeff() == y.maxCoeff()) {
        throw SeparationError("all responses are equal; the logistic MLE does not exist");
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
    Eigen::VectorXd mu(x.rows());
    Eigen::VectorXd w(x.rows());
    double previous_norm = 0.0;
    int growth = 0;
    for (int it = 0; it < max_iterations; ++it) {
        const Eigen::VectorXd eta = x * beta;
        for (Eigen::Index j = 0; j < eta.size(); ++j) {
            mu(j) = inverse_logit(eta(j));
            w(j) = mu(j) * (1.0 - mu(j));
        }
        const Eigen::VectorXd grad = x.transpose() * (y - mu) / n;
        if (grad.norm() < kMleGradientTolerance) {
            if (eta.cwiseAbs().maxCoeff() > 18.0) {
                throw SeparationError("fitted probabilities are numerically 0 or 1; responses are (quasi-)separated");
            }
            return beta;
        }
        const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x / n;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
            throw SeparationError("Fisher information became singular; responses are (quasi-)separated");
        }
        beta += ldlt.solve(grad);
        const double norm = beta.norm();
        growth = norm > previous_norm + 1.0 ? growth + 1 : 0;
        previous_norm = norm;
        if (!beta.allFinite() || norm > 1e4 || growth > 8) {
            throw SeparationError("coefficients diverge; responses are (quasi-)separated");
        }
    }
    throw SeparationError("Newton-Raphson did not converge; the MLE may not exist");
}

/// Least-squares fit (the identity link's cross-moment solution).
inline Eigen::VectorXd fit_ols(const RegressionDataset& data) {
    return data.x().colPivHouseholderQr().solve(data.y());
}

inline Eigen::VectorXd fit_glm(const RegressionDataset& data, Link link) {
    return link == Link::Logit ? fit_mle_logistic(data) : fit_ols(data);
}

// ---------------------------------------------------------------------------
// Atoms
// ---------------------------------------------------------------------------

/// Distinct covariate rows (exact equality) and the atom of each data row.
class AtomTable {
public:
    explicit AtomTable(const Eigen::MatrixXd& x) {
        std::map<std::vector<double>, std::size_t> index;
        row_atom_.reserve(static_cast<std::size_t>(x.rows()));
        std::vector<Eigen::Index> firsts;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            std::vector<double> key(x.cols());
            for (Eigen::Index k = 0; k < x.cols(); ++k) {
                key[static_cast<std::size_t>(k)] = x(r, k) == 0.0 ? 0.0 : x(r, k);
            }
            auto [it, inserted] = index.emplace(std::move(key), firsts.size());
            if (inserted) {
                firsts.push_back(r);
            }
            row_atom_.push_back(it->second);
        }
        atoms_.resize(static_cast<Eigen::Index>(firsts.size()), x.cols());
        for (std::size_t a = 0; a < firsts.size(); ++a) {
            atoms_.row(static_cast<Eigen::Index>(a)) = x.row(firsts[a]);
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(atoms_.rows()); }
    [[nodiscard]] const Eigen::MatrixXd& atoms() const noexcept { return atoms_; }
    [[nodiscard]] auto atom(std::size_t a) const { return atoms_.row(static_cast<Eigen::Index>(a)); }
    [[nodiscard]] std::size_t atom_of_row(std::size_t row) const { return row_atom_.at(row); }
    [[nodiscard]] std::span<const std::size_t> row_atoms() const noexcept { return row_atom_; }

private:
    Eigen::MatrixXd atoms_;
    std::vector<std::size_t> row_atom_;
};

// ---------------------------------------------------------------------------
// Regression state
// ---------------------------------------------------------------------------

/// Per-trajectory state of GLM predictive resampling.
///
/// History is stored by atom: the covariate draw is a Polya urn over the atom ids
/// of all i observations, and the conditional empirical draw picks uniformly
/// among the responses seen at the drawn atom.
class RegressionState {
public:
    RegressionState(const RegressionDataset& data, Link link)
        : table_(std::make_shared<AtomTable>(data.x())), link_(link), i_(data.size()) {
        const std::size_t na = table_->size();
        responses_.resize(na);
        counts_.assign(na, 0.0);
        sums_.assign(na, 0.0);
        history_.reserve(data.size());
        for (std::size_t r = 0; r < data.size(); ++r) {
            const std::size_t a = table_->atom_of_row(r);
            const double y = data.y()(static_cast<Eigen::Index>(r));
            history_.push_back(static_cast<std::uint32_t>(a));
            responses_[a].push_back(y);
            counts_[a] += 1.0;
            sums_[a] += y;
        }
        cross_moment_ = data.x().transpose() * data.y() / static_cast<double>(data.size());
        beta_ = fit_glm(data, link);
        const double n = static_cast<double>(data.size());
        Eigen::MatrixXd info = Eigen::MatrixXd::Zero(data.x().cols(), data.x().cols());
        if (link == Link::Logit) {
            for (Eigen::Index r = 0; r < data.x().rows(); ++r) {
                const double mu = inverse_logit(data.x().row(r).dot(beta_));
                info += mu * (1.0 - mu) * data.x().row(r).transpose() * data.x().row(r);
            }
            info /= n;
        } else {
            const Eigen::VectorXd resid = data.y() - data.x() * beta_;
            const double dof = n > static_cast<double>(data.dim()) ? n - static_cast<double>(data.dim()) : n;
            sigma2_ = resid.squaredNorm() / dof;
            if (!(sigma2_ > 0.0)) {
                throw NumericalDegeneracy("identity-link residual variance is zero");
            }
            info = data.x().transpose() * data.x() / (n * sigma2_);
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
            throw NumericalDegeneracy("initial Fisher information is singular");
        }
        fisher_inv_ = ldlt.solve(Eigen::MatrixXd::Identity(info.rows(), info.cols()));
        eta_scratch_.resize(beta_.size());
    }

    [[nodiscard]] Link link() const noexcept { return link_; }
    [[nodiscard]] std::size_t count() const noexcept { return i_; }
    [[nodiscard]] const AtomTable& atoms() const noexcept { return *table_; }
    [[nodiscard]] std::size_t atom_count() const noexcept { return table_->size(); }
    [[nodiscard]] const Eigen::VectorXd& beta() const noexcept { return beta_; }
    [[nodiscard]] const Eigen::VectorXd& cross_moment() const noexcept { return cross_moment_; }
    [[nodiscard]] const Eigen::MatrixXd& fisher_inverse() const noexcept { return fisher_inv_; }
    [[nodiscard]] double residual_variance() const noexcept { return sigma2_; }

    void set_beta(Eigen::VectorXd beta) { beta_ = std::move(beta); }

    /// w_i^x = (1/i) #{j : x_j = x}.
    [[nodiscard]] double atom_weight(std::size_t a) const { return counts_.at(a) / static_cast<double>(i_); }
    /// m_i^{yx} = (1/i) sum_{j : x_j = x} y_j.
    [[nodiscard]] double conditional_accumulator(std::size_t a) const {
        return sums_.at(a) / static_cast<double>(i_);
    }
    [[nodiscard]] std::span<const double> responses(std::size_t a) const { return responses_.at(a); }
    [[nodiscard]] double atom_count_of(std::size_t a) const { return counts_.at(a); }
    [[nodiscard]] double atom_sum_of(std::size_t a) const { return sums_.at(a); }

    /// g^{-1}(x_a' beta) at the current coefficients.
    [[nodiscard]] double atom_mean(std::size_t a, const Eigen::VectorXd& beta) const {
        return inverse_link(link_, table_->atom(a).dot(beta));
    }

    /// Appends one observation (atom a, response y) and updates every accumulator.
    void absorb(std::size_t a, double y) {
        history_.push_back(static_cast<std::uint32_t>(a));
        responses_[a].push_back(y);
        counts_[a] += 1.0;
        sums_[a] += y;
        const double step = 1.0 / static_cast<double>(i_ + 1);
        cross_moment_ += step * (y * table_->atom(a).transpose() - cross_moment_);
        ++i_;
    }

    /// Draws (atom, response) from the mixture predictive with weight lambda.
    std::pair<std::size_t, double> draw(double lambda, RngStream& rng) const {
        const std::size_t a = history_[RngStream::scale_index(rng.uniform(), history_.size())];
        const double u = rng.uniform();
        if (u < lambda) {
            const double mean = atom_mean(a, beta_);
            if (link_ == Link::Logit) {
                return {a, rng.uniform() < mean ? 1.0 : 0.0};
            }
            return {a, mean + std::sqrt(sigma2_) * rng.normal()};
        }
        const auto& ys = responses_[a];
        return {a, ys[RngStream::scale_index((u - lambda) / (1.0 - lambda), ys.size())]};
    }

    /// Cross-moment residual of `beta` against the current history, max-norm.
    [[nodiscard]] double residual(const Eigen::VectorXd& beta) const { return moment_gap(beta).cwiseAbs().maxCoeff(); }

    /// (1/i) sum_a n_a g^{-1}(x_a' beta) x_a - mu^{yx}.
    [[nodiscard]] Eigen::VectorXd moment_gap(const Eigen::VectorXd& beta) const {
        Eigen::VectorXd fitted = Eigen::VectorXd::Zero(beta.size());
        for (std::size_t a = 0; a < table_->size(); ++a) {
            if (counts_[a] > 0.0) {
                fitted += counts_[a] * atom_mean(a, beta) * table_->atom(a).transpose();
            }
        }
        return fitted / static_cast<double>(i_) - cross_moment_;
    }

    /// Solves the cross-moment equations on the current history, warm-started.
    [[nodiscard]] Eigen::VectorXd solve_exact(Eigen::VectorXd beta, double tolerance = 1e-12,
                                              int max_iterations = 50) const {
        const Eigen::Index p = beta.size();
        const double i = static_cast<double>(i_);
        if (link_ == Link::Identity) {
            Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(p, p);
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
            for (std::size_t a = 0; a < table_->size(); ++a) {
                if (counts_[a] > 0.0) {
                    const auto xa = table_->atom(a).transpose();
                    gram += counts_[a] * xa * xa.transpose();
                    rhs += sums_[a] * xa;
                }
            }
            return gram.ldlt().solve(rhs);
        }
        for (int it = 0; it < max_iterations; ++it) {
            Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
            Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
            for (std::size_t a = 0; a < table_->size(); ++a) {
                if (counts_[a] > 0.0) {
                    const auto xa = table_->atom(a).transpose();
                    const double mu = atom_mean(a, beta);
                    grad += (sums_[a] - counts_[a] * mu) * xa;
                    hess += counts_[a] * mu * (1.0 - mu) * xa * xa.transpose();
                }
            }
            grad /= i;
            if (grad.norm() < tolerance) {
                return beta;
            }
            hess /= i;
            beta += hess.ldlt().solve(grad);
            if (!beta.allFinite() || beta.norm() > 1e4) {
                throw SeparationError("exact cross-moment refit diverged");
            }
        }
        if (residual(beta) < kMleGradientTolerance) {
            return beta;
        }
        throw NumericalDegeneracy("exact cross-moment refit did not converge");
    }

    /// One Newton step with frozen curvature: beta + (1/i) I_n(beta_n)^{-1} s(y, beta; x_a).
    /// Call after absorb(a, y), so i already counts the new observation.
    [[nodiscard]] Eigen::VectorXd online_step(const Eigen::VectorXd& beta, std::size_t a, double y) const {
        const double r = y - atom_mean(a, beta);
        const double scale = link_ == Link::Logit ? r : r / sigma2_;
        return beta + (scale / static_cast<double>(i_)) * (fisher_inv_ * table_->atom(a).transpose());
    }

    /// mu^{y|x} = m^{yx} / w^x.
    [[nodiscard]] double conditional_mean(std::size_t a) const {
        if (a >= table_->size() || counts_[a] == 0.0) {
            throw UndefinedConditional("conditional mean at an atom with zero weight");
        }
        return sums_[a] / counts_[a];
    }

private:
    std::shared_ptr<const AtomTable> table_;
    Link link_;
    std::size_t i_;
    std::vector<std::uint32_t> history_;
    std::vector<std::vector<double>> responses_;
    std::vector<double> counts_;
    std::vector<double> sums_;
    Eigen::VectorXd cross_moment_;
    Eigen::VectorXd beta_;
    Eigen::MatrixXd fisher_inv_;
    Eigen::VectorXd eta_scratch_;
    double sigma2_ = 1.0;
};

inline double conditional_mean(const RegressionState& state, std::size_t atom) { return state.conditional_mean(atom); }

/// Analytic E[mu_{i+1}^{yx} | F_i]: parametric part (1/i) sum_a n_a g^{-1}(x_a' beta) x_a,
/// nonparametric part mu^{yx} (index-swap identity).
inline Eigen::VectorXd expected_next_cross_moment(const RegressionState& state, Concentration c) {
    const double i = static_cast<double>(state.count());
    const double lambda = c.weight(i);
    const Eigen::VectorXd parametric = state.moment_gap(state.beta()) + state.cross_moment();
    return (i / (i + 1.0)) * state.cross_moment() +
           (lambda * parametric + (1.0 - lambda) * state.cross_moment()) / (i + 1.0);
}

/// Analytic E[m_{i+1}^{yx} | F_i] = i/(i+1) m + (1/(i+1)) [ i/(c+i) m + c/(c+i) g^{-1}(x' beta) w ].
inline double expected_next_conditional_accumulator(const RegressionState& state, Concentration c, std::size_t a) {
    const double i = static_cast<double>(state.count());
    const double lambda = c.weight(i);
    const double m = state.conditional_accumulator(a);
    const double w = state.atom_weight(a);
    return (i / (i + 1.0)) * m +
           ((1.0 - lambda) * m + lambda * state.atom_mean(a, state.beta()) * w) / (i + 1.0);
}

// ---------------------------------------------------------------------------
// GLM predictive resampling
// ---------------------------------------------------------------------------

enum class BetaUpdate { Exact, Online };

inline std::size_t default_glm_horizon(std::size_t n) { return n + 4000; }

struct GlmConfig {
    std::size_t horizon = 0;  ///< final effective sample count N
    std::size_t replicates = 1;
    Concentration concentration;
    BetaUpdate update = BetaUpdate::Online;
    Link link = Link::Logit;
    std::vector<std::size_t> report_rows;  ///< data rows whose atoms are tracked
    bool record_paths = false;
    std::size_t path_stride = 10;
    unsigned threads = 0;

    void validate(std::size_t n) const {
        if (horizon <= n) {
            throw InvalidInput("horizon N must exceed n");
        }
        if (replicates == 0) {
            throw InvalidInput("need at least one replicate");
        }
        if (record_paths && path_stride == 0) {
            throw InvalidInput("path stride must be positive");
        }
        for (std::size_t r : report_rows) {
            if (r >= n) {
                throw InvalidInput("report row " + std::to_string(r) + " out of range");
            }
        }
    }
};

struct GlmPathPoint {
    std::size_t count;
    Eigen::VectorXd beta;
    std::vector<double> conditional_means;
};

struct GlmSample {
    std::size_t replicate = 0;
    Eigen::VectorXd beta;
    std::vector<double> conditional_means;  ///< at report_rows' atoms
    std::vector<double> atom_weights;       ///< at report_rows' atoms
    std::vector<GlmPathPoint> path;
};

struct GlmRun {
    std::vector<GlmSample> samples;
    std::vector<AbortedTrajectory> aborted;
};

namespace detail {

inline void report_atoms(const RegressionState& state, const std::vector<std::size_t>& atoms,
                         std::vector<double>& means, std::vector<double>* weights) {
    means.clear();
    for (std::size_t a : atoms) {
        means.push_back(state.conditional_mean(a));
        if (weights) {
            weights->push_back(state.atom_weight(a));
        }
    }
}

} // namespace detail

/// Predictive resampling for GLMs: x from the Bayesian bootstrap, y from
/// c/(c+i) f_beta(y|x) + i/(c+i) P_i(y|x), beta either re-solved exactly from
/// the cross-moment equations or advanced by one frozen-curvature Newton step.
inline GlmRun run_glm_mp(const RegressionDataset& data, const GlmConfig& cfg, std::uint64_t seed) {
    const std::size_t n = data.size();
    cfg.validate(n);
    const RegressionState initial(data, cfg.link);
    std::vector<std::size_t> tracked;
    for (std::size_t r : cfg.report_rows) {
        tracked.push_back(initial.atoms().atom_of_row(r));
    }
    std::vector<std::optional<GlmSample>> slots(cfg.replicates);
    std::vector<std::optional<AbortedTrajectory>> failures(cfg.replicates);

    parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
        RngStream rng(seed, b);
        RegressionState state = initial;
        GlmSample out;
        out.replicate = b;
        auto record = [&] {
            GlmPathPoint pt{state.count(), state.beta(), {}};
            detail::report_atoms(state, tracked, pt.conditional_means, nullptr);
            out.path.push_back(std::move(pt));
        };
        if (cfg.record_paths) {
            record();
        }
        for (std::size_t i = n; i < cfg.horizon; ++i) {
            const double lambda = cfg.concentration.weight(static_cast<double>(i));
            const auto [a, y] = state.draw(lambda, rng);
            state.absorb(a, y);
            if (cfg.update == BetaUpdate::Online) {
                state.set_beta(state.online_step(state.beta(), a, y));
            } else {
                try {
                    state.set_beta(state.solve_exact(state.beta()));
                } catch (const NumericalDegeneracy& e) {
                    failures[b] = AbortedTrajectory{b, i + 1, e.what()};
                    return;
                }
            }
            if (cfg.record_paths && ((i + 1 - n) % cfg.path_stride == 0 || i + 1 == cfg.horizon)) {
                record();
            }
        }
        out.beta = state.beta();
        detail::report_atoms(state, tracked, out.conditional_means, &out.atom_weights);
        slots[b] = std::move(out);
    });

    GlmRun run;
    for (std::size_t b = 0; b < cfg.replicates; ++b) {
        if (slots[b]) {
            run.samples.push_back(std::move(*slots[b]));
        } else if (failures[b]) {
            run.aborted.push_back(std::move(*failures[b]));
        }
    }
    return run;
}

struct BetaComparisonStep {
    std::size_t count;
    double exact_norm;
    double online_norm;
    double difference_norm;
};

/// Runs trajectories driven by `cfg.update` and carries the other update rule
/// as a shadow on the same draws, recording ||beta_exact - beta_online|| per step.
inline std::vector<std::vector<BetaComparisonStep>> compare_exact_online(const RegressionDataset& data,
                                                                         const GlmConfig& cfg, std::uint64_t seed) {
    const std::size_t n = data.size();
    cfg.validate(n);
    const RegressionState initial(data, cfg.link);
    std::vector<std::vector<BetaComparisonStep>> out(cfg.replicates);
    parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
        RngStream rng(seed, b);
        RegressionState state = initial;
        Eigen::VectorXd shadow = state.beta();
        auto& steps = out[b];
        steps.reserve(cfg.horizon - n);
        for (std::size_t i = n; i < cfg.horizon; ++i) {
            const double lambda = cfg.concentration.weight(static_cast<double>(i));
            const auto [a, y] = state.draw(lambda, rng);
            const Eigen::VectorXd before = state.beta();
            state.absorb(a, y);
            Eigen::VectorXd exact;
            Eigen::VectorXd online;
            if (cfg.update == BetaUpdate::Exact) {
                exact = state.solve_exact(before);
                online = state.online_step(shadow, a, y);
                state.set_beta(exact);
                shadow = online;
            } else {
                online = state.online_step(before, a, y);
                exact = state.solve_exact(shadow);
                state.set_beta(online);
                shadow = exact;
            }
            steps.push_back({state.count(), exact.norm(), online.norm(), (exact - online).norm()});
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Joint energy score for regression
// ---------------------------------------------------------------------------

/// Joint predictive on (x, y): x uniform over the training rows, y | x from the
/// mixture of f_beta and the conditional empirical law at x's atom. Scored
/// against validation rows with the kernel sqrt(|x - x'|^2 / (4p) + (y - y')^2).
class JointScorer {
public:
    JointScorer(const RegressionDataset& train, const RegressionDataset& validation, Eigen::VectorXd beta, Link link)
        : train_(train), validation_(validation), beta_(std::move(beta)), link_(link) {
        const AtomTable table(train.x());
        const double scale = 1.0 / (4.0 * static_cast<double>(train.covariate_dim()));
        const auto nt = static_cast<Eigen::Index>(train.size());
        const auto nv = static_cast<Eigen::Index>(validation.size());
        std::vector<double> atom_sum(table.size(), 0.0);
        std::vector<double> atom_cnt(table.size(), 0.0);
        for (std::size_t r = 0; r < train.size(); ++r) {
            atom_sum[table.atom_of_row(r)] += train.y()(static_cast<Eigen::Index>(r));
            atom_cnt[table.atom_of_row(r)] += 1.0;
        }
        model_mean_.resize(nt);
        empirical_mean_.resize(nt);
        atom_of_row_.assign(table.row_atoms().begin(), table.row_atoms().end());
        for (Eigen::Index r = 0; r < nt; ++r) {
            model_mean_(r) = inverse_link(link_, train.x().row(r).dot(beta_));
            const std::size_t a = table.atom_of_row(static_cast<std::size_t>(r));
            empirical_mean_(r) = atom_sum[a] / atom_cnt[a];
        }
        cross_sq_.resize(nv, nt);
        for (Eigen::Index v = 0; v < nv; ++v) {
            for (Eigen::Index r = 0; r < nt; ++r) {
                cross_sq_(v, r) = scale * (validation.x().row(v) - train.x().row(r)).squaredNorm();
            }
        }
        train_sq_.resize(nt, nt);
        for (Eigen::Index r = 0; r < nt; ++r) {
            for (Eigen::Index s = r; s < nt; ++s) {
                const double d = scale * (train.x().row(r) - train.x().row(s)).squaredNorm();
                train_sq_(r, s) = d;
                train_sq_(s, r) = d;
            }
        }
        // Conditional empirical responses per training row (continuous responses).
        responses_.resize(table.size());
        for (std::size_t r = 0; r < train.size(); ++r) {
            responses_[table.atom_of_row(r)].push_back(train.y()(static_cast<Eigen::Index>(r)));
        }
        binary_ = train.is_binary() && validation.is_binary() && link_ == Link::Logit;
        if (binary_) {
            same_ = train_sq_.array().sqrt();
            diff_ = (train_sq_.array() + 1.0).sqrt();
        }
    }

    [[nodiscard]] bool exact_available() const noexcept { return binary_; }

    /// Exact mean joint energy score over the validation rows (binary responses).
    [[nodiscard]] double score(double lambda) const {
        if (!binary_) {
            throw InvalidInput("exact joint score needs binary responses under the logit link");
        }
        const Eigen::VectorXd q = lambda * model_mean_ + (1.0 - lambda) * empirical_mean_;
        const double nt = static_cast<double>(train_.size());
        const Eigen::VectorXd qc = Eigen::VectorXd::Ones(q.size()) - q;
        // E k(Z, Z') = sum_{r,s} [(q_r q_s + qc_r qc_s) same + (q_r qc_s + qc_r q_s) diff] / nt^2
        const double pair = (q.dot(same_ * q) + qc.dot(same_ * qc) + q.dot(diff_ * qc) + qc.dot(diff_ * q)) / (nt * nt);
        double acc = 0.0;
        for (Eigen::Index v = 0; v < cross_sq_.rows(); ++v) {
            const double y = validation_.y()(v);
            double e = 0.0;
            for (Eigen::Index r = 0; r < cross_sq_.cols(); ++r) {
                const double d = cross_sq_(v, r);
                e += q(r) * std::sqrt(d + (y - 1.0) * (y - 1.0)) + qc(r) * std::sqrt(d + y * y);
            }
            acc += -2.0 * e / nt + pair;
        }
        return acc / static_cast<double>(cross_sq_.rows());
    }

    struct Estimate {
        double value;
        double standard_error;
    };

    /// Monte Carlo estimate from `draws` independent pairs (Z, Z') of the joint predictive.
    [[nodiscard]] Estimate score_monte_carlo(double lambda, std::size_t draws, RngStream& rng) const {
        const double sigma = link_ == Link::Identity ? residual_sd() : 0.0;
        auto draw = [&](Eigen::Index& row) {
            row = static_cast<Eigen::Index>(rng.index(train_.size()));
            const double u = rng.uniform();
            if (u < lambda) {
                const double mean = model_mean_(row);
                return link_ == Link::Logit ? (rng.uniform() < mean ? 1.0 : 0.0) : mean + sigma * rng.normal();
            }
            const auto& ys = responses_[atom_of_row_[static_cast<std::size_t>(row)]];
            return ys[RngStream::scale_index((u - lambda) / (1.0 - lambda), ys.size())];
        };
        double sum = 0.0;
        double sum_sq = 0.0;
        const auto nv = cross_sq_.rows();
        for (std::size_t m = 0; m < draws; ++m) {
            Eigen::Index r1 = 0;
            Eigen::Index r2 = 0;
            const double y1 = draw(r1);
            const double y2 = draw(r2);
            double to_validation = 0.0;
            for (Eigen::Index v = 0; v < nv; ++v) {
                const double dy = validation_.y()(v) - y1;
                to_validation += std::sqrt(cross_sq_(v, r1) + dy * dy);
            }
            const double term = -2.0 * to_validation / static_cast<double>(nv) +
                                std::sqrt(train_sq_(r1, r2) + (y1 - y2) * (y1 - y2));
            sum += term;
            sum_sq += term * term;
        }
        const double md = static_cast<double>(draws);
        const double mean = sum / md;
        const double var = std::max(0.0, (sum_sq - md * mean * mean) / (md - 1.0));
        return {mean, std::sqrt(var / md)};
    }

private:
    [[nodiscard]] double residual_sd() const {
        const Eigen::VectorXd resid = train_.y() - train_.x() * beta_;
        const double n = static_cast<double>(train_.size());
        const double dof = n > static_cast<double>(train_.dim()) ? n - static_cast<double>(train_.dim()) : n;
        return std::sqrt(resid.squaredNorm() / dof);
    }

    const RegressionDataset& train_;
    const RegressionDataset& validation_;
    Eigen::VectorXd beta_;
    Link link_;
    Eigen::VectorXd model_mean_;
    Eigen::VectorXd empirical_mean_;
    std::vector<std::size_t> atom_of_row_;
    std::vector<std::vector<double>> responses_;
    Eigen::MatrixXd cross_sq_;
    Eigen::MatrixXd train_sq_;
    Eigen::MatrixXd same_;
    Eigen::MatrixXd diff_;
    bool binary_ = false;
};

/// {0} + log-spaced 10^1..10^5 (three per decade) + {+inf}.
inline std::vector<double> default_regression_grid() {
    std::vector<double> grid{0.0};
    for (int k = 0; k <= 12; ++k) {
        grid.push_back(std::pow(10.0, 1.0 + k / 3.0));
    }
    grid.push_back(kInf);
    return grid;
}

struct RegressionSelectionOptions {
    std::size_t folds = 5;
    std::vector<double> c_grid = default_regression_grid();
    std::size_t mc_draws = 2000;  ///< used when the exact joint score is unavailable or forced off
    bool force_monte_carlo = false;
    Link link = Link::Logit;
};

struct RegressionSelection {
    Concentration c_hat;
    double lambda_hat = 0.0;
    std::vector<ScorePoint> score_curve;    ///< fold-averaged score relative to c = 0
    std::vector<double> standard_errors;    ///< Monte Carlo SE per grid point (0 when exact)
};

/// k-fold selection of c for the GLM mixture on a joint-energy-score grid.
inline RegressionSelection select_c_regression(const RegressionDataset& data, const RegressionSelectionOptions& opt,
                                               std::uint64_t seed) {
    if (opt.folds < 2) {
        throw InvalidInput("regression selection needs at least two folds");
    }
    if (opt.c_grid.empty() || opt.c_grid.front() != 0.0) {
        throw InvalidInput("regression c grid must start at c = 0 (the baseline)");
    }
    const std::size_t n = data.size();
    const auto folds = make_folds(n, KFold{opt.folds}, seed);
    const std::size_t g = opt.c_grid.size();
    std::vector<double> total(g, 0.0);
    std::vector<double> var_total(g, 0.0);
    std::vector<char> held(n);
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::fill(held.begin(), held.end(), 0);
        for (std::size_t j : folds[f]) {
            held[j] = 1;
        }
        std::vector<std::size_t> train_rows;
        for (std::size_t j = 0; j < n; ++j) {
            if (!held[j]) {
                train_rows.push_back(j);
            }
        }
        std::optional<RegressionDataset> train;
        std::optional<RegressionDataset> valid;
        Eigen::VectorXd beta;
        try {
            train.emplace(data.subset(train_rows));
            valid.emplace(data.subset(folds[f]));
            beta = fit_glm(*train, opt.link);
        } catch (const Error& e) {
            throw NumericalDegeneracy("fold " + std::to_string(f) + ": " + e.what());
        }
        const JointScorer scorer(*train, *valid, beta, opt.link);
        const double nt = static_cast<double>(train->size());
        const bool exact = scorer.exact_available() && !opt.force_monte_carlo;
        double base = 0.0;
        for (std::size_t k = 0; k < g; ++k) {
            const double lambda = Concentration(opt.c_grid[k]).weight(nt);
            double value = 0.0;
            if (exact) {
                value = scorer.score(lambda);
            } else {
                RngStream rng(seed, 1 + f * g + k);
                const auto est = scorer.score_monte_carlo(lambda, opt.mc_draws, rng);
                value = est.value;
                var_total[k] += est.standard_error * est.standard_error;
            }
            if (k == 0) {
                base = value;
            }
            total[k] += value - base;
        }
    }
    RegressionSelection out;
    const double nf = static_cast<double>(folds.size());
    std::size_t best = 0;
    for (std::size_t k = 0; k < g; ++k) {
        const double s = k == 0 ? 0.0 : total[k] / nf;
        out.score_curve.push_back({opt.c_grid[k], s});
        out.standard_errors.push_back(k == 0 ? 0.0 : std::sqrt(var_total[k] + var_total[0]) / nf);
        if (s > out.score_curve[best].score) {
            best = k;
        }
    }
    out.c_hat = Concentration(opt.c_grid[best]);
    out.lambda_hat = out.c_hat.weight(static_cast<double>(n));
    return out;
}

} // namespace mmp
