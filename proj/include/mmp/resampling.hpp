#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmp/core.hpp"
#include "mmp/errors.hpp"
#include "mmp/families.hpp"
#include "mmp/parallel.hpp"
#include "mmp/rng.hpp"

namespace mmp {

/// Number of raw moments carried along every trajectory, at least four so that
/// skewness and kurtosis are available for any family order.
template <ParametricFamily F>
constexpr std::size_t tracked_order() {
    return std::max<std::size_t>(F::parameter_count, 4);
}

inline std::size_t default_horizon(std::size_t n) { return n + 1500; }

struct TrajectoryConfig {
    std::size_t horizon = 0;  ///< final effective sample count N
    std::size_t replicates = 1;
    Concentration concentration;
    bool record_paths = false;
    std::size_t path_stride = 10;
    std::vector<double> quantiles{0.5, 0.95};
    unsigned threads = 0;  ///< 0 = hardware concurrency

    void validate(std::size_t n) const {
        if (horizon <= n) {
            throw InvalidInput("horizon N=" + std::to_string(horizon) + " must exceed n=" + std::to_string(n));
        }
        if (replicates == 0) {
            throw InvalidInput("need at least one replicate");
        }
        if (record_paths && path_stride == 0) {
            throw InvalidInput("path stride must be positive");
        }
        for (double q : quantiles) {
            if (!(q > 0.0 && q < 1.0)) {
                throw InvalidInput("quantile levels must lie in (0,1)");
            }
        }
    }
};

struct Functionals {
    double mean = 0.0;
    double variance = 0.0;
    double skewness = std::numeric_limits<double>::quiet_NaN();
    double kurtosis = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::pair<double, double>> quantiles;  ///< (level, value)

    [[nodiscard]] double quantile(double level) const {
        for (const auto& [q, v] : quantiles) {
            if (q == level) {
                return v;
            }
        }
        throw InvalidInput("quantile level was not extracted");
    }

    [[nodiscard]] static std::string quantile_name(double level) {
        std::ostringstream os;
        os << 'q' << level;
        return os.str();
    }

    [[nodiscard]] std::map<std::string, double> as_map() const {
        std::map<std::string, double> out{
            {"mean", mean}, {"variance", variance}, {"skewness", skewness}, {"kurtosis", kurtosis}};
        for (const auto& [q, v] : quantiles) {
            out[quantile_name(q)] = v;
        }
        return out;
    }
};

struct PosteriorSample {
    std::size_t replicate = 0;
    MomentState final_moments{{0.0}, 1};
    std::vector<double> theta;
    Functionals functionals;
    std::vector<MomentState> path;
};

struct AbortedTrajectory {
    std::size_t replicate;
    std::size_t step;
    std::string reason;
};

/// Samples ordered by replicate index; failed trajectories are listed, never resampled.
struct PosteriorRun {
    std::vector<PosteriorSample> samples;
    std::vector<AbortedTrajectory> aborted;
};

// ---------------------------------------------------------------------------
// Functionals
// ---------------------------------------------------------------------------

/// Mean, variance, skewness and kurtosis from raw moments.
inline Functionals moment_functionals(const MomentState& moments) {
    const auto m = moments.moments();
    Functionals f;
    f.mean = m[0];
    if (m.size() < 2) {
        return f;
    }
    f.variance = m[1] - m[0] * m[0];
    if (!(f.variance > 0.0)) {
        throw DegenerateMoments("functional extraction: nonpositive variance");
    }
    const double mu = m[0];
    if (m.size() >= 3) {
        const double c3 = m[2] - 3.0 * mu * m[1] + 2.0 * mu * mu * mu;
        f.skewness = c3 / std::pow(f.variance, 1.5);
    }
    if (m.size() >= 4) {
        const double c4 = m[3] - 4.0 * mu * m[2] + 6.0 * mu * mu * m[1] - 3.0 * mu * mu * mu * mu;
        f.kurtosis = c4 / (f.variance * f.variance);
    }
    return f;
}

/// Functionals of a final predictive. Moments come from the tracked empirical
/// moments; when the predictive is purely parametric the shape functionals come
/// from the parametric component. Quantiles invert the predictive CDF.
template <ParametricFamily F>
Functionals extract_functionals(const MixturePredictive<F>& pred, const MomentState& moments,
                                std::span<const double> quantile_levels) {
    Functionals f = moment_functionals(moments);
    if (pred.lambda() == 1.0) {
        f.skewness = pred.family().skewness(pred.theta());
        f.kurtosis = pred.family().kurtosis(pred.theta());
    }
    for (double q : quantile_levels) {
        f.quantiles.emplace_back(q, pred.quantile(q));
    }
    return f;
}

/// Functionals of the empirical distribution of `atoms` (BB final predictive).
inline Functionals empirical_functionals(const MomentState& moments, std::vector<double> atoms,
                                         std::span<const double> quantile_levels) {
    Functionals f = moment_functionals(moments);
    std::sort(atoms.begin(), atoms.end());
    for (double q : quantile_levels) {
        f.quantiles.emplace_back(q, empirical_quantile(atoms, q));
    }
    return f;
}

/// inf{y : sum_{x_j <= y} w_j >= q}.
inline double weighted_quantile(std::span<const double> values, std::span<const double> weights, double q) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    double cum = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        cum += weights[order[k]];
        const bool tie_follows = k + 1 < order.size() && values[order[k + 1]] == values[order[k]];
        if (cum >= q && !tie_follows) {
            return values[order[k]];
        }
    }
    return values[order.back()];
}

// ---------------------------------------------------------------------------
// One-step conditional expectation of the moments
// ---------------------------------------------------------------------------

/// Analytic E[mu_{i+1}^(k) | F_i] for k = 1..p under the mixture predictive with
/// theta_i fitted by method of moments: the martingale identity checks this
/// against the current moments.
template <ParametricFamily F>
std::vector<double> expected_next_moments(const F& family, const MomentState& state, Concentration c) {
    const auto p = F::parameter_count;
    const auto theta = family.mom_inverse(state.moments().first(p));
    const double i = static_cast<double>(state.count());
    const double lambda = c.weight(i);
    std::vector<double> out(p);
    for (std::size_t k = 1; k <= p; ++k) {
        const double mu = state.moment(k);
        const double draw = lambda * family.raw_moment(theta, static_cast<int>(k)) + (1.0 - lambda) * mu;
        out[k - 1] = (i / (i + 1.0)) * mu + draw / (i + 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

namespace detail {

inline bool should_record(const TrajectoryConfig& cfg, std::size_t steps_done, std::size_t total_steps) {
    return cfg.record_paths && (steps_done % cfg.path_stride == 0 || steps_done == total_steps);
}

inline PosteriorRun collect(std::vector<std::optional<PosteriorSample>>& slots,
                            std::vector<std::optional<AbortedTrajectory>>& failures) {
    PosteriorRun run;
    for (std::size_t b = 0; b < slots.size(); ++b) {
        if (slots[b]) {
            run.samples.push_back(std::move(*slots[b]));
        } else if (failures[b]) {
            run.aborted.push_back(std::move(*failures[b]));
        }
    }
    return run;
}

} // namespace detail

/// Moment predictive resampling with the mixture predictive
/// c/(c+i) f_theta_i + i/(c+i) P_i, theta_i refit by method of moments after
/// each draw. Replicate b uses RngStream(seed, b).
template <ParametricFamily F>
PosteriorRun run_moment_mp(const Dataset& data, const F& family, const TrajectoryConfig& cfg, std::uint64_t seed) {
    const std::size_t n = data.size();
    cfg.validate(n);
    constexpr std::size_t p = F::parameter_count;
    const MomentState initial = MomentState::from_sample(data.values(), tracked_order<F>());
    const auto theta0 = family.mom_inverse(initial.moments().first(p));

    std::vector<std::optional<PosteriorSample>> slots(cfg.replicates);
    std::vector<std::optional<AbortedTrajectory>> failures(cfg.replicates);
    const std::size_t total_steps = cfg.horizon - n;

    parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
        RngStream rng(seed, b);
        std::vector<double> atoms(data.values().begin(), data.values().end());
        atoms.reserve(cfg.horizon);
        MomentState state = initial;
        auto theta = theta0;
        PosteriorSample out;
        out.replicate = b;
        if (cfg.record_paths) {
            out.path.push_back(state);
        }
        for (std::size_t i = n; i < cfg.horizon; ++i) {
            const double lambda = cfg.concentration.weight(static_cast<double>(i));
            const double y = sample_mixture(family, theta, atoms, lambda, rng);
            atoms.push_back(y);
            state.update(y);
            try {
                theta = family.mom_inverse(state.moments().first(p));
            } catch (const DegenerateMoments& e) {
                failures[b] = AbortedTrajectory{b, i + 1, e.what()};
                return;
            }
            if (detail::should_record(cfg, i + 1 - n, total_steps)) {
                out.path.push_back(state);
            }
        }
        const double lambda_final = cfg.concentration.weight(static_cast<double>(cfg.horizon));
        MixturePredictive<F> pred(family, theta, std::move(atoms), lambda_final);
        out.functionals = extract_functionals(pred, state, cfg.quantiles);
        out.theta = family.to_vector(theta);
        out.final_moments = std::move(state);
        slots[b] = std::move(out);
    });
    return detail::collect(slots, failures);
}

enum class BootstrapMode { Sequential, Direct };

/// Bayesian bootstrap. Sequential mode runs the Polya urn forward to the horizon
/// with the same uniform consumption as run_moment_mp at c = 0; direct mode
/// draws Dirichlet(1,...,1) weights over the n atoms.
inline PosteriorRun run_bb(const Dataset& data, const TrajectoryConfig& cfg, BootstrapMode mode, std::uint64_t seed) {
    const std::size_t n = data.size();
    constexpr std::size_t order = 4;
    std::vector<std::optional<PosteriorSample>> slots(cfg.replicates);
    std::vector<std::optional<AbortedTrajectory>> failures(cfg.replicates);

    if (mode == BootstrapMode::Direct) {
        if (cfg.replicates == 0) {
            throw InvalidInput("need at least one replicate");
        }
        parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
            RngStream rng(seed, b);
            std::vector<double> w(n);
            double total = 0.0;
            for (double& wj : w) {
                wj = rng.exponential();
                total += wj;
            }
            std::vector<double> m(order, 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                w[j] /= total;
                double pw = 1.0;
                for (std::size_t k = 0; k < order; ++k) {
                    pw *= data[j];
                    m[k] += w[j] * pw;
                }
            }
            PosteriorSample out;
            out.replicate = b;
            out.final_moments = MomentState(std::move(m), n);
            if (n == 1) {
                out.functionals.mean = data[0];
                out.functionals.variance = 0.0;
            } else {
                try {
                    out.functionals = moment_functionals(out.final_moments);
                } catch (const DegenerateMoments& e) {
                    failures[b] = AbortedTrajectory{b, 0, e.what()};
                    return;
                }
            }
            for (double q : cfg.quantiles) {
                out.functionals.quantiles.emplace_back(q, weighted_quantile(data.values(), w, q));
            }
            slots[b] = std::move(out);
        });
        return detail::collect(slots, failures);
    }

    cfg.validate(n);
    const MomentState initial = MomentState::from_sample(data.values(), order);
    const std::size_t total_steps = cfg.horizon - n;
    parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
        RngStream rng(seed, b);
        std::vector<double> atoms(data.values().begin(), data.values().end());
        atoms.reserve(cfg.horizon);
        MomentState state = initial;
        PosteriorSample out;
        out.replicate = b;
        if (cfg.record_paths) {
            out.path.push_back(state);
        }
        for (std::size_t i = n; i < cfg.horizon; ++i) {
            const double y = sample_empirical(atoms, rng);
            atoms.push_back(y);
            state.update(y);
            if (detail::should_record(cfg, i + 1 - n, total_steps)) {
                out.path.push_back(state);
            }
        }
        if (n == 1) {
            out.functionals.mean = atoms.front();
            out.functionals.variance = 0.0;
            for (double q : cfg.quantiles) {
                out.functionals.quantiles.emplace_back(q, atoms.front());
            }
        } else {
            try {
                out.functionals = empirical_functionals(state, std::move(atoms), cfg.quantiles);
            } catch (const DegenerateMoments& e) {
                failures[b] = AbortedTrajectory{b, cfg.horizon, e.what()};
                return;
            }
        }
        out.final_moments = std::move(state);
        slots[b] = std::move(out);
    });
    return detail::collect(slots, failures);
}

/// Parametric martingale posterior via the score/Fisher recursion
/// theta_i = theta_{i-1} + i^{-1} I(theta_{i-1})^{-1} s(y_i, theta_{i-1}),
/// y_i ~ f_{theta_{i-1}}. Normal family only.
inline PosteriorRun run_parametric_mp_score(const Dataset& data, const NormalFamily& family,
                                            const TrajectoryConfig& cfg, std::uint64_t seed) {
    const std::size_t n = data.size();
    cfg.validate(n);
    const MomentState initial = MomentState::from_sample(data.values(), tracked_order<NormalFamily>());
    const auto theta0 = family.mom_inverse(initial.moments().first(2));
    std::vector<std::optional<PosteriorSample>> slots(cfg.replicates);
    std::vector<std::optional<AbortedTrajectory>> failures(cfg.replicates);
    const std::size_t total_steps = cfg.horizon - n;

    parallel_for(cfg.replicates, cfg.threads, [&](std::size_t b) {
        RngStream rng(seed, b);
        MomentState state = initial;
        auto theta = theta0;
        PosteriorSample out;
        out.replicate = b;
        if (cfg.record_paths) {
            out.path.push_back(state);
        }
        for (std::size_t i = n + 1; i <= cfg.horizon; ++i) {
            const double y = family.sample(theta, rng);
            try {
                theta = family.score_step(theta, y, 1.0 / static_cast<double>(i));
            } catch (const NumericalDegeneracy& e) {
                failures[b] = AbortedTrajectory{b, i, e.what()};
                return;
            }
            state.update(y);
            if (detail::should_record(cfg, i - n, total_steps)) {
                out.path.push_back(state);
            }
        }
        MixturePredictive<NormalFamily> pred(family, theta, {}, 1.0);
        out.functionals.mean = theta.mean;
        out.functionals.variance = theta.variance;
        out.functionals.skewness = family.skewness(theta);
        out.functionals.kurtosis = family.kurtosis(theta);
        for (double q : cfg.quantiles) {
            out.functionals.quantiles.emplace_back(q, pred.quantile(q));
        }
        out.theta = family.to_vector(theta);
        out.final_moments = std::move(state);
        slots[b] = std::move(out);
    });
    return detail::collect(slots, failures);
}

} // namespace mmp
