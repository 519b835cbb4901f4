#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mmp/resampling.hpp"
#include "oracles.hpp"

using namespace mmp;

namespace {

TrajectoryConfig config(std::size_t horizon, std::size_t replicates, Concentration c = Concentration(0.0)) {
    TrajectoryConfig cfg;
    cfg.horizon = horizon;
    cfg.replicates = replicates;
    cfg.concentration = c;
    cfg.threads = 1;
    return cfg;
}

/// E[mu_{i+1}^(k)] by integrating the update over the mixture predictive:
/// quadrature for the normal part, an explicit sum over the atoms.
double brute_next_moment(const std::vector<double>& atoms, const NormalParams& theta, double lambda, int k) {
    const double i = static_cast<double>(atoms.size());
    double mu = 0.0;
    for (double a : atoms) {
        mu += std::pow(a, k);
    }
    mu /= i;
    auto after = [&](double y) { return (i * mu + std::pow(y, k)) / (i + 1.0); };
    double empirical = 0.0;
    for (double a : atoms) {
        empirical += after(a);
    }
    empirical /= i;
    const double parametric = oracle::normal_expectation(after, theta.mean, theta.variance);
    return lambda * parametric + (1.0 - lambda) * empirical;
}

} // namespace

TEST(ExpectedNextMoments, MatchesBruteForceIntegration) {
    const NormalFamily f;
    RngStream rng(31, 0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> atoms;
        const std::size_t n = 3 + rng.index(20);
        for (std::size_t k = 0; k < n; ++k) {
            atoms.push_back(2.0 * rng.normal() + 1.0);
        }
        const auto state = MomentState::from_sample(atoms, 2);
        const auto theta = f.mom_inverse(state.moments());
        for (double c : {0.0, 3.0, 100.0, kInf}) {
            const auto expected = expected_next_moments(f, state, Concentration(c));
            const double lambda = Concentration(c).weight(static_cast<double>(n));
            for (int k = 1; k <= 2; ++k) {
                EXPECT_NEAR(expected[k - 1], brute_next_moment(atoms, theta, lambda, k), 1e-8);
            }
        }
    }
}

TEST(ExpectedNextMoments, MartingalePropertyOnRandomStates) {
    const NormalFamily f;
    RngStream rng(32, 0);
    for (int trial = 0; trial < 2000; ++trial) {
        const double mean = 20.0 * rng.normal();
        const double var = 1e-3 + 50.0 * rng.uniform();
        const MomentState state({mean, var + mean * mean}, 1 + rng.index(100000));
        for (double c : {0.0, 1.0, 144.0, 1e10, kInf}) {
            const auto next = expected_next_moments(f, state, Concentration(c));
            for (std::size_t k = 1; k <= 2; ++k) {
                EXPECT_NEAR(next[k - 1], state.moment(k), 1e-12 * std::max(1.0, std::abs(state.moment(k))));
            }
        }
    }
}

TEST(MomentFunctionals, CentralMomentsFromRawOracle) {
    const std::vector<double> ys{1.0, 2.0, 2.0, 7.0, -1.0};
    const auto f = moment_functionals(MomentState::from_sample(ys, 4));
    const double mean = 11.0 / 5.0;
    double c2 = 0;
    double c3 = 0;
    double c4 = 0;
    for (double y : ys) {
        c2 += std::pow(y - mean, 2) / 5.0;
        c3 += std::pow(y - mean, 3) / 5.0;
        c4 += std::pow(y - mean, 4) / 5.0;
    }
    EXPECT_NEAR(f.mean, mean, 1e-14);
    EXPECT_NEAR(f.variance, c2, 1e-13);
    EXPECT_NEAR(f.skewness, c3 / std::pow(c2, 1.5), 1e-12);
    EXPECT_NEAR(f.kurtosis, c4 / (c2 * c2), 1e-12);
    EXPECT_THROW(moment_functionals(MomentState({1.0, 1.0}, 3)), DegenerateMoments);
}

TEST(WeightedQuantile, MatchesScanOracleWithTies) {
    const std::vector<double> v{3.0, 1.0, 2.0, 2.0, 5.0};
    const std::vector<double> w{0.1, 0.2, 0.3, 0.1, 0.3};
    EXPECT_EQ(weighted_quantile(v, w, 0.2), 1.0);
    EXPECT_EQ(weighted_quantile(v, w, 0.21), 2.0);
    EXPECT_EQ(weighted_quantile(v, w, 0.6), 2.0);
    EXPECT_EQ(weighted_quantile(v, w, 0.65), 3.0);
    EXPECT_EQ(weighted_quantile(v, w, 0.95), 5.0);
}

TEST(TrajectoryConfig, Validation) {
    EXPECT_THROW(config(10, 1).validate(10), InvalidInput);
    EXPECT_THROW(config(20, 0).validate(10), InvalidInput);
    auto cfg = config(20, 1);
    cfg.quantiles = {1.0};
    EXPECT_THROW(cfg.validate(10), InvalidInput);
    EXPECT_EQ(default_horizon(100), 1600u);
}

TEST(RunMomentMp, ZeroConcentrationIsBitIdenticalToSequentialBootstrap) {
    const Dataset data(oracle::normal_sample(30, 1.0, 25.0, 1));
    auto cfg = config(530, 20);
    cfg.record_paths = true;
    cfg.path_stride = 1;
    const auto mp = run_moment_mp(data, NormalFamily{}, cfg, 77);
    const auto bb = run_bb(data, cfg, BootstrapMode::Sequential, 77);
    ASSERT_EQ(mp.samples.size(), bb.samples.size());
    for (std::size_t b = 0; b < mp.samples.size(); ++b) {
        EXPECT_EQ(mp.samples[b].path, bb.samples[b].path);
        EXPECT_EQ(mp.samples[b].functionals.quantiles, bb.samples[b].functionals.quantiles);
    }
}

TEST(RunMomentMp, ResultsIndependentOfThreadCount) {
    const Dataset data(oracle::normal_sample(25, 0.0, 4.0, 2));
    auto cfg = config(300, 12, Concentration(10.0));
    const auto one = run_moment_mp(data, NormalFamily{}, cfg, 5);
    cfg.threads = 4;
    const auto four = run_moment_mp(data, NormalFamily{}, cfg, 5);
    ASSERT_EQ(one.samples.size(), four.samples.size());
    for (std::size_t b = 0; b < one.samples.size(); ++b) {
        EXPECT_EQ(one.samples[b].final_moments, four.samples[b].final_moments);
        EXPECT_EQ(one.samples[b].theta, four.samples[b].theta);
    }
}

TEST(RunMomentMp, InfiniteConcentrationHasNormalShape) {
    const Dataset data(oracle::normal_sample(40, 1.0, 25.0, 3));
    const auto run = run_moment_mp(data, NormalFamily{}, config(240, 10, Concentration::infinite()), 6);
    for (const auto& s : run.samples) {
        EXPECT_EQ(s.functionals.skewness, 0.0);
        EXPECT_EQ(s.functionals.kurtosis, 3.0);
        const NormalParams theta{s.theta[0], s.theta[1]};
        EXPECT_NEAR(s.functionals.quantile(0.5), theta.mean, 1e-8);
    }
}

TEST(RunMomentMp, PathsRecordedAtStride) {
    const Dataset data(oracle::normal_sample(10, 0.0, 1.0, 4));
    auto cfg = config(35, 2, Concentration(5.0));
    cfg.record_paths = true;
    cfg.path_stride = 10;
    const auto run = run_moment_mp(data, NormalFamily{}, cfg, 1);
    std::vector<std::size_t> counts;
    for (const auto& s : run.samples.front().path) {
        counts.push_back(s.count());
    }
    EXPECT_EQ(counts, (std::vector<std::size_t>{10, 20, 30, 35}));
}

TEST(RunMomentMp, DegenerateDataRejectedBeforeResampling) {
    const Dataset data({2.0, 2.0, 2.0});
    EXPECT_THROW(run_moment_mp(data, NormalFamily{}, config(10, 3, Concentration(0.0)), 1), DegenerateMoments);
}

TEST(RunMomentMp, AbortReportedWithReplicateAndStep) {
    // Two atoms 1e-5 apart: the urn proportion p drifts, and once p(1-p) < 0.01
    // the variance falls under the floor and that trajectory aborts.
    const Dataset data({0.0, 1e-5});
    const auto run = run_moment_mp(data, NormalFamily{}, config(2000, 300, Concentration(0.0)), 3);
    EXPECT_EQ(run.samples.size() + run.aborted.size(), 300u);
    EXPECT_FALSE(run.aborted.empty());
    EXPECT_FALSE(run.samples.empty());
    for (const auto& a : run.aborted) {
        EXPECT_LT(a.replicate, 300u);
        EXPECT_GT(a.step, 2u);
        EXPECT_LE(a.step, 2000u);
        EXPECT_FALSE(a.reason.empty());
    }
    for (std::size_t k = 1; k < run.samples.size(); ++k) {
        EXPECT_LT(run.samples[k - 1].replicate, run.samples[k].replicate);
    }
}

TEST(RunBb, DirectAndSequentialAgreeInDistribution) {
    const Dataset data(oracle::normal_sample(20, 1.0, 25.0, 5));
    const std::size_t b = 4000;
    const auto seq = run_bb(data, config(20 + 5000, b), BootstrapMode::Sequential, 1);
    const auto dir = run_bb(data, config(20 + 5000, b), BootstrapMode::Direct, 2);
    auto stats = [](const PosteriorRun& r) {
        double s = 0;
        double s2 = 0;
        for (const auto& x : r.samples) {
            s += x.functionals.mean;
            s2 += x.functionals.mean * x.functionals.mean;
        }
        const double m = s / r.samples.size();
        return std::pair{m, s2 / r.samples.size() - m * m};
    };
    const auto [m1, v1] = stats(seq);
    const auto [m2, v2] = stats(dir);
    EXPECT_NEAR(m1, m2, 4.0 * std::sqrt((v1 + v2) / b));
    EXPECT_NEAR(v1 / v2, 1.0, 0.12);
    const double sample_mean = std::accumulate(data.values().begin(), data.values().end(), 0.0) / 20.0;
    EXPECT_NEAR(m2, sample_mean, 4.0 * std::sqrt(v2 / b));
}

TEST(RunBb, SingleObservationIsPointMass) {
    const Dataset data({3.5});
    const auto run = run_bb(data, config(50, 3), BootstrapMode::Direct, 1);
    for (const auto& s : run.samples) {
        EXPECT_EQ(s.functionals.mean, 3.5);
        EXPECT_EQ(s.functionals.quantile(0.95), 3.5);
    }
    const auto seq = run_bb(data, config(50, 3), BootstrapMode::Sequential, 1);
    for (const auto& s : seq.samples) {
        EXPECT_EQ(s.functionals.variance, 0.0);
    }
}

TEST(RunParametricScore, MeanIsUnbiasedAndShapeNormal) {
    const Dataset data(oracle::normal_sample(50, 1.0, 25.0, 6));
    const std::size_t b = 2000;
    const auto run = run_parametric_mp_score(data, NormalFamily{}, config(50 + 500, b), 9);
    double s = 0;
    double s2 = 0;
    for (const auto& x : run.samples) {
        s += x.functionals.mean;
        s2 += x.functionals.mean * x.functionals.mean;
        EXPECT_EQ(x.functionals.skewness, 0.0);
    }
    const double m = s / b;
    const double se = std::sqrt((s2 / b - m * m) / b);
    const double sample_mean = std::accumulate(data.values().begin(), data.values().end(), 0.0) / 50.0;
    EXPECT_NEAR(m, sample_mean, 4.0 * se);
}
