#include "steerkit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

// Counter-based stream: cheap to create per resample.
class SplitMixStream {
public:
    explicit SplitMixStream(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next() { return rng::splitmix64(state_++); }
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

private:
    std::uint64_t state_;
};

double quantile_sorted(const std::vector<double>& v, double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= v.size()) return v.back();
    const double frac = pos - static_cast<double>(i);
    return v[i] + frac * (v[i + 1] - v[i]);
}

double mean_of(const std::vector<bool>& v) {
    return static_cast<double>(std::count(v.begin(), v.end(), true)) / static_cast<double>(v.size());
}

}  // namespace

void PairedOutcomes::validate() const {
    if (base.empty()) throw ValidationError("paired outcomes are empty");
    if (base.size() != treated.size()) {
        throw ValidationError("paired outcomes differ in length (" + std::to_string(base.size()) + " vs " +
                              std::to_string(treated.size()) + ")");
    }
}

BootstrapResult bootstrap_ci(const PairedOutcomes& pairs, std::size_t samples, double level, std::uint64_t seed,
                             std::size_t threads) {
    pairs.validate();
    if (samples < 1000) throw ValidationError("bootstrap needs at least 1000 samples");
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must be in (0, 1)");
    const auto n = pairs.base.size();
    std::vector<int> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = int(pairs.treated[i]) - int(pairs.base[i]);

    std::vector<double> stats(samples);
    auto run = [&](std::size_t begin, std::size_t end) {
        for (std::size_t s = begin; s < end; ++s) {
            SplitMixStream stream(rng::derive_seed(seed, s));
            long sum = 0;
            for (std::size_t k = 0; k < n; ++k) sum += diff[stream.below(n)];
            stats[s] = static_cast<double>(sum) / static_cast<double>(n);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, samples));
    if (threads == 1) {
        run(0, samples);
    } else {
        std::vector<std::thread> pool;
        const auto chunk = (samples + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const auto b = std::min(samples, t * chunk);
            pool.emplace_back(run, b, std::min(samples, b + chunk));
        }
        for (auto& t : pool) t.join();
    }
    std::sort(stats.begin(), stats.end());
    BootstrapResult r;
    r.improvement = mean_of(pairs.treated) - mean_of(pairs.base);
    const double tail = (1.0 - level) / 2.0;
    r.lo = std::min(quantile_sorted(stats, tail), r.improvement);
    r.hi = std::max(quantile_sorted(stats, 1.0 - tail), r.improvement);
    return r;
}

double binomial_two_sided(std::size_t k, std::size_t n) {
    if (n == 0) return 1.0;
    const auto m = std::min(k, n - k);
    if (n <= 62) {
        // exact: integer binomial coefficients over a power of two
        std::uint64_t sum = 0;
        std::uint64_t coeff = 1;
        for (std::size_t i = 0; i <= m; ++i) {
            sum += coeff;
            coeff = coeff * (n - i) / (i + 1);
        }
        return std::min(1.0, 2.0 * std::ldexp(static_cast<double>(sum), -static_cast<int>(n)));
    }
    double tail = 0.0;
    for (std::size_t i = 0; i <= m; ++i) {
        const double log_term = std::lgamma(double(n) + 1) - std::lgamma(double(i) + 1) - std::lgamma(double(n - i) + 1) -
                                double(n) * std::log(2.0);
        tail += std::exp(log_term);
    }
    return std::min(1.0, 2.0 * tail);
}

double chi2_sf_1df(double x) {
    if (x <= 0.0) return 1.0;
    return std::erfc(std::sqrt(x / 2.0));
}

McNemarResult mcnemar_from_counts(std::size_t b, std::size_t c) {
    McNemarResult r;
    r.b = b;
    r.c = c;
    const auto n = b + c;
    if (n == 0) return r;
    if (n <= kExactMcNemarLimit) {
        r.exact = true;
        r.p_value = binomial_two_sided(b, n);
    } else {
        r.exact = false;
        // The correction never pushes |b - c| below zero.
        const double d = std::max(0.0, std::abs(double(b) - double(c)) - 1.0);
        r.statistic = d * d / double(n);
        r.p_value = chi2_sf_1df(r.statistic);
    }
    return r;
}

McNemarResult mcnemar_test(const PairedOutcomes& pairs) {
    pairs.validate();
    std::size_t b = 0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < pairs.base.size(); ++i) {
        if (pairs.base[i] && !pairs.treated[i]) ++b;
        if (!pairs.base[i] && pairs.treated[i]) ++c;
    }
    return mcnemar_from_counts(b, c);
}

double mcnemar(const PairedOutcomes& pairs) { return mcnemar_test(pairs).p_value; }

SignificanceRow significance(const PairedOutcomes& pairs, std::size_t samples, std::uint64_t seed, std::size_t threads) {
    SignificanceRow row;
    row.ci = bootstrap_ci(pairs, samples, 0.95, seed, threads);
    row.test = mcnemar_test(pairs);
    row.n = pairs.base.size();
    row.base_accuracy = mean_of(pairs.base);
    row.treated_accuracy = mean_of(pairs.treated);
    row.significant = row.ci.lo > 0.0;
    return row;
}

}  // namespace steerkit
