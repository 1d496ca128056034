#pragma once

// Paired significance statistics: percentile bootstrap CI and McNemar's test.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace steerkit {

struct PairedOutcomes {
    std::vector<bool> base;
    std::vector<bool> treated;

    void validate() const;
};

struct BootstrapResult {
    double improvement = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

inline constexpr std::size_t kDefaultBootstrapSamples = 10000;

// Resample i uses its own stream derived from (seed, i), so the result does not depend on
// how samples are split across threads.
BootstrapResult bootstrap_ci(const PairedOutcomes& pairs, std::size_t samples = kDefaultBootstrapSamples,
                             double level = 0.95, std::uint64_t seed = 0, std::size_t threads = 1);

struct McNemarResult {
    std::size_t b = 0;  // base correct, treated wrong
    std::size_t c = 0;  // base wrong, treated correct
    bool exact = true;
    double statistic = 0.0;  // chi-square statistic (0 for the exact branch)
    double p_value = 1.0;
};

inline constexpr std::size_t kExactMcNemarLimit = 25;

McNemarResult mcnemar_test(const PairedOutcomes& pairs);
McNemarResult mcnemar_from_counts(std::size_t b, std::size_t c);
double mcnemar(const PairedOutcomes& pairs);

// Two-sided exact binomial p-value for k successes of n at p = 1/2.
double binomial_two_sided(std::size_t k, std::size_t n);
// Upper tail of the chi-square distribution with one degree of freedom.
double chi2_sf_1df(double x);

struct SignificanceRow {
    std::size_t n = 0;
    double base_accuracy = 0.0;
    double treated_accuracy = 0.0;
    BootstrapResult ci;
    McNemarResult test;
    bool significant = false;  // ci.lo > 0
};

SignificanceRow significance(const PairedOutcomes& pairs, std::size_t samples = kDefaultBootstrapSamples,
                             std::uint64_t seed = 0, std::size_t threads = 1);

}  // namespace steerkit
