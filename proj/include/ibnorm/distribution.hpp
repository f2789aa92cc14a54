#pragma once

#include "ibnorm/norm.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ibn::dist {

struct DensityCurve {
    std::vector<double> grid;
    std::vector<double> density;
    double bandwidth = 0.0;
    std::size_t n_samples = 0;

    /// Trapezoidal integral of the density over the grid.
    double integral() const;
    /// Columns: grid_point,density
    std::string to_csv() const;
};

struct MomentReport {
    double mean = 0.0;
    double variance = 0.0;
    double skewness = 0.0;
    double excess_kurtosis = 0.0;
    std::size_t n = 0;

    nlohmann::json to_json() const;
};

/// 0.9 * min(sd, IQR/1.34) * n^(-1/5).
double silverman_bandwidth(std::span<const double> samples);

/// Gaussian-kernel density on `grid_points` points spanning mean ± 6 sd.
/// Needs at least 10 finite samples with non-zero variance.
DensityCurve gaussian_kde(std::span<const double> samples, std::optional<double> bandwidth = std::nullopt,
                          std::size_t grid_points = 512);

/// Population moments; excess kurtosis is m4/m2^2 - 3. Needs n >= 4.
MomentReport moments(std::span<const double> samples);

/// Kozachenko-Leonenko k-nearest-neighbour differential entropy (nats) of a
/// 1-D sample. Needs more than k samples.
double knn_entropy(std::span<const double> samples, std::size_t k = 3);

/// Fraction of samples with |x| > threshold.
double tail_mass(std::span<const double> samples, double threshold);

enum class InputDistribution { Gaussian, Laplace, Exponential };

InputDistribution parse_distribution(const std::string &name);
std::string to_string(InputDistribution dist);

struct DistributionParams {
    InputDistribution kind = InputDistribution::Gaussian;
    /// Gaussian: mean/sd. Laplace: location/scale. Exponential: mean in `scale`, shifted by `location`.
    double location = 0.0;
    double scale = 1.0;
};

std::vector<double> draw_samples(const DistributionParams &params, std::size_t n, std::uint64_t seed);

struct SweepConfig {
    DistributionParams distribution;
    std::size_t n_samples = 100000;
    /// Features per normalization group; samples are laid out as rows of this width.
    std::size_t group_size = 100;
    std::size_t grid_points = 512;
    std::optional<double> bandwidth;
    std::uint64_t seed = 0;
};

struct SweepResult {
    NormSpec spec;
    std::vector<double> outputs;
    DensityCurve curve;
    MomentReport moments;
};

/// Pre-affine outputs of every spec applied to the same seeded sample.
std::vector<SweepResult> pipeline_density_sweep(const SweepConfig &config, std::span<const NormSpec> specs);

/// Pre-affine forward of `spec` over rows of `values` (row width = group size).
std::vector<double> normalize_pre_affine(const NormSpec &spec, std::span<const double> values,
                                         std::size_t group_size, std::uint64_t seed = 0);

} // namespace ibn::dist
