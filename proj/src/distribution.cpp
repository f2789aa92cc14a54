#include "ibnorm/distribution.hpp"

#include "ibnorm/errors.hpp"
#include "ibnorm/ops.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace ibn::dist {

double DensityCurve::integral() const {
    double total = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i)
        total += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    return total;
}

std::string DensityCurve::to_csv() const {
    std::string out = "grid_point,density\n";
    char buf[96];
    for (std::size_t i = 0; i < grid.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", grid[i], density[i]);
        out += buf;
    }
    return out;
}

nlohmann::json MomentReport::to_json() const {
    return {{"mean", mean}, {"variance", variance}, {"skewness", skewness}, {"excess_kurtosis", excess_kurtosis},
            {"n", n}};
}

namespace {

void require_finite(std::span<const double> samples) {
    for (double v : samples)
        if (!std::isfinite(v))
            throw ContractError("samples must be finite");
}

double quantile_sorted(const std::vector<double> &sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace

MomentReport moments(std::span<const double> samples) {
    if (samples.size() < 4)
        throw ContractError("moments needs at least 4 samples");
    MomentReport r;
    r.n = samples.size();
    const auto n = static_cast<double>(r.n);
    for (double v : samples)
        r.mean += v;
    r.mean /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : samples) {
        const double d = v - r.mean;
        const double d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    r.variance = m2;
    if (m2 > 0.0) {
        r.skewness = m3 / std::pow(m2, 1.5);
        r.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    }
    return r;
}

double silverman_bandwidth(std::span<const double> samples) {
    if (samples.size() < 2)
        throw ContractError("silverman_bandwidth needs at least 2 samples");
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(samples.size());
    double mean = 0.0, ss = 0.0;
    for (double v : samples)
        mean += v;
    mean /= n;
    for (double v : samples)
        ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    double spread = sd;
    if (iqr > 0.0)
        spread = std::min(sd, iqr / 1.34);
    return 0.9 * spread * std::pow(static_cast<double>(samples.size()), -0.2);
}

DensityCurve gaussian_kde(std::span<const double> samples, std::optional<double> bandwidth,
                          std::size_t grid_points) {
    if (samples.size() < 10)
        throw ContractError("gaussian_kde needs at least 10 samples");
    if (grid_points < 2)
        throw ContractError("gaussian_kde needs at least 2 grid points");
    require_finite(samples);
    const auto m = moments(samples);
    if (!(m.variance > 0.0))
        throw ContractError("gaussian_kde: zero-variance sample is a point mass");
    const double h = bandwidth.value_or(silverman_bandwidth(samples));
    if (!(h > 0.0))
        throw ContractError("gaussian_kde: bandwidth must be positive");

    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());

    DensityCurve curve;
    curve.bandwidth = h;
    curve.n_samples = samples.size();
    curve.grid.resize(grid_points);
    curve.density.resize(grid_points);
    const double sd = std::sqrt(m.variance);
    const double lo = m.mean - 6.0 * sd, hi = m.mean + 6.0 * sd;
    const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    const double reach = 9.0 * h; // exp(-40.5) is below f64 resolution of the sum
    for (std::size_t g = 0; g < grid_points; ++g) {
        const double x = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
        auto first = std::lower_bound(sorted.begin(), sorted.end(), x - reach);
        auto last = std::upper_bound(first, sorted.end(), x + reach);
        double total = 0.0;
        for (auto it = first; it != last; ++it) {
            const double z = (x - *it) / h;
            total += std::exp(-0.5 * z * z);
        }
        curve.grid[g] = x;
        curve.density[g] = total * norm;
    }
    return curve;
}

double knn_entropy(std::span<const double> samples, std::size_t k) {
    if (k == 0 || samples.size() <= k)
        throw ContractError("knn_entropy needs more than k samples");
    require_finite(samples);
    std::vector<double> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    double log_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // Merge outward from i; the k-th step gives the k-th neighbour distance.
        std::size_t left = i, right = i;
        double dist = 0.0;
        for (std::size_t step = 0; step < k; ++step) {
            const double dl = left > 0 ? s[i] - s[left - 1] : INFINITY;
            const double dr = right + 1 < n ? s[right + 1] - s[i] : INFINITY;
            if (dl <= dr) {
                dist = dl;
                --left;
            } else {
                dist = dr;
                ++right;
            }
        }
        if (!(dist > 0.0))
            throw NumericError("knn_entropy: duplicate samples give a zero neighbour distance");
        log_sum += std::log(2.0 * dist);
    }
    using boost::math::digamma;
    return digamma(static_cast<double>(n)) - digamma(static_cast<double>(k)) + log_sum / static_cast<double>(n);
}

double tail_mass(std::span<const double> samples, double threshold) {
    if (samples.empty())
        return 0.0;
    std::size_t count = 0;
    for (double v : samples)
        count += std::abs(v) > threshold ? 1 : 0;
    return static_cast<double>(count) / static_cast<double>(samples.size());
}

InputDistribution parse_distribution(const std::string &name) {
    if (name == "gaussian" || name == "normal")
        return InputDistribution::Gaussian;
    if (name == "laplace")
        return InputDistribution::Laplace;
    if (name == "exponential")
        return InputDistribution::Exponential;
    throw ConfigError("unknown distribution '" + name + "'");
}

std::string to_string(InputDistribution dist) {
    switch (dist) {
    case InputDistribution::Gaussian:
        return "gaussian";
    case InputDistribution::Laplace:
        return "laplace";
    case InputDistribution::Exponential:
        return "exponential";
    }
    return "?";
}

std::vector<double> draw_samples(const DistributionParams &params, std::size_t n, std::uint64_t seed) {
    if (!(params.scale > 0.0))
        throw ConfigError("distribution scale must be positive");
    std::mt19937_64 rng(seed);
    std::vector<double> out(n);
    switch (params.kind) {
    case InputDistribution::Gaussian: {
        std::normal_distribution<double> d(params.location, params.scale);
        for (auto &v : out)
            v = d(rng);
        break;
    }
    case InputDistribution::Laplace: {
        std::exponential_distribution<double> e(1.0);
        std::bernoulli_distribution coin(0.5);
        for (auto &v : out) {
            const double mag = e(rng) * params.scale;
            v = params.location + (coin(rng) ? mag : -mag);
        }
        break;
    }
    case InputDistribution::Exponential: {
        std::exponential_distribution<double> e(1.0 / params.scale);
        for (auto &v : out)
            v = params.location + e(rng);
        break;
    }
    }
    return out;
}

std::vector<double> normalize_pre_affine(const NormSpec &spec_in, std::span<const double> values,
                                         std::size_t group_size, std::uint64_t seed) {
    if (group_size == 0 || values.size() % group_size != 0)
        throw ConfigError("sample count " + std::to_string(values.size()) + " is not a multiple of group size " +
                          std::to_string(group_size));
    NormSpec spec = spec_in;
    spec.affine = false;
    NoGradGuard no_grad;
    NormLayer layer = build_norm(spec, group_size, seed);
    Tensor x({values.size() / group_size, group_size}, std::vector<double>(values.begin(), values.end()));
    Tensor y = layer.forward(x);
    return {y.data().begin(), y.data().end()};
}

std::vector<SweepResult> pipeline_density_sweep(const SweepConfig &config, std::span<const NormSpec> specs) {
    for (const auto &spec : specs)
        spec.validate();
    const auto samples = draw_samples(config.distribution, config.n_samples, config.seed);
    std::vector<SweepResult> results;
    results.reserve(specs.size());
    for (const auto &spec : specs) {
        SweepResult r;
        r.spec = spec;
        r.outputs = normalize_pre_affine(spec, samples, config.group_size, config.seed);
        r.curve = gaussian_kde(r.outputs, config.bandwidth, config.grid_points);
        r.moments = moments(r.outputs);
        results.push_back(std::move(r));
    }
    return results;
}

} // namespace ibn::dist
