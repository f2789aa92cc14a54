#include "doctest.h"

#include "ibnorm/compression.hpp"
#include "ibnorm/distribution.hpp"
#include "ibnorm/errors.hpp"
#include "ibnorm/norm.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace ibn;
using namespace ibn::dist;

namespace {

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
    return draw_samples({InputDistribution::Gaussian, 0.0, 1.0}, n, seed);
}

} // namespace

TEST_CASE("kde of a standard Gaussian") {
    const auto xs = gaussian(100000, 11);
    const auto curve = gaussian_kde(xs);
    REQUIRE(curve.grid.size() == 512);
    CHECK(curve.n_samples == xs.size());
    // Value at the grid point nearest zero.
    std::size_t best = 0;
    for (std::size_t i = 0; i < curve.grid.size(); ++i)
        if (std::abs(curve.grid[i]) < std::abs(curve.grid[best]))
            best = i;
    const double peak = 1.0 / std::sqrt(2 * std::numbers::pi);
    CHECK(std::abs(curve.grid[best]) < 0.03);
    CHECK(std::abs(curve.density[best] - peak) / peak < 0.05);
    CHECK(std::abs(curve.integral() - 1.0) < 0.02);
    for (double d : curve.density)
        CHECK(d >= 0.0);
    for (std::size_t i = 1; i < curve.grid.size(); ++i)
        REQUIRE(curve.grid[i] > curve.grid[i - 1]);
}

TEST_CASE("kde of a symmetric sample is symmetric") {
    auto xs = gaussian(2000, 12);
    const std::size_t n = xs.size();
    for (std::size_t i = 0; i < n; ++i)
        xs.push_back(-xs[i]);
    const auto curve = gaussian_kde(xs);
    const std::size_t g = curve.grid.size();
    for (std::size_t i = 0; i < g / 2; ++i)
        CHECK(curve.density[i] == doctest::Approx(curve.density[g - 1 - i]).epsilon(1e-9));
}

TEST_CASE("kde contracts") {
    CHECK_THROWS_AS(gaussian_kde(std::vector<double>(20, 3.0)), ContractError);
    CHECK_THROWS_AS(gaussian_kde(gaussian(5, 1)), ContractError);
    auto xs = gaussian(50, 1);
    xs[3] = std::nan("");
    CHECK_THROWS_AS(gaussian_kde(xs), ContractError);
    CHECK(gaussian_kde(gaussian(50, 1), 0.3).bandwidth == 0.3);
}

TEST_CASE("silverman bandwidth") {
    // IQR/1.34 exceeds the sample SD here, so h = 0.9 sd n^-0.2 with sd = sqrt(10/9).
    std::vector<double> two{-1, -1, 1, 1, -1, 1, -1, 1, -1, 1};
    CHECK(silverman_bandwidth(two) == doctest::Approx(0.9 * std::sqrt(10.0 / 9.0) * std::pow(10.0, -0.2)));
}

TEST_CASE("moments examples") {
    std::vector<double> pm;
    for (int i = 0; i < 1000; ++i)
        pm.push_back(i % 2 ? 1.0 : -1.0);
    const auto two = moments(pm);
    CHECK(two.excess_kurtosis == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(two.variance == doctest::Approx(1.0));
    CHECK(std::abs(two.skewness) < 1e-12);

    const auto big = moments(gaussian(1000000, 13));
    CHECK(std::abs(big.excess_kurtosis) < 0.05);
    CHECK(std::abs(big.mean) < 0.01);
    CHECK(big.variance == doctest::Approx(1.0).epsilon(0.01));

    auto xs = gaussian(1000, 14);
    auto shifted = xs;
    for (auto &v : shifted)
        v += 37.5;
    const auto a = moments(xs), b = moments(shifted);
    CHECK(b.variance == doctest::Approx(a.variance).epsilon(1e-9));
    CHECK(b.excess_kurtosis == doctest::Approx(a.excess_kurtosis).epsilon(1e-8));
    CHECK(b.mean == doctest::Approx(a.mean + 37.5));

    CHECK_THROWS_AS(moments(std::vector<double>{1, 2, 3}), ContractError);
    CHECK(a.to_json().at("n") == 1000);
}

TEST_CASE("knn entropy") {
    // Differential entropy of N(0,1) is 0.5 ln(2 pi e).
    const double exact = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e);
    CHECK(knn_entropy(gaussian(20000, 15)) == doctest::Approx(exact).epsilon(0.02));
    // Scaling by c shifts the entropy by ln c.
    auto xs = gaussian(5000, 16);
    auto scaled = xs;
    for (auto &v : scaled)
        v *= 3.0;
    CHECK(knn_entropy(scaled) - knn_entropy(xs) == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    CHECK_THROWS_AS(knn_entropy(std::vector<double>{1, 2, 3}, 3), ContractError);
}

TEST_CASE("compression reduces knn entropy") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto xs = gaussian(10000, 100 + seed);
        const Tensor y = compress(Tensor({xs.size()}, xs), {CompressionKind::L, 4.0, xs.size()});
        wins += knn_entropy(y.data()) <= knn_entropy(xs);
    }
    CHECK(wins == 5);
}

TEST_CASE("tail mass") {
    CHECK(tail_mass(std::vector<double>{-3, -1, 0, 2, 4}, 2.5) == doctest::Approx(0.4));
    CHECK(tail_mass(std::vector<double>{-3, -1, 0, 2, 4}, 10.0) == 0.0);
}

TEST_CASE("draw_samples") {
    CHECK(gaussian(100, 7) == gaussian(100, 7));
    CHECK(gaussian(100, 7) != gaussian(100, 8));
    const auto e = moments(draw_samples({InputDistribution::Exponential, 0.0, 2.0}, 200000, 3));
    CHECK(e.mean == doctest::Approx(2.0).epsilon(0.02));
    CHECK(e.excess_kurtosis == doctest::Approx(6.0).epsilon(0.15));
    const auto l = moments(draw_samples({InputDistribution::Laplace, 1.0, 1.0}, 200000, 3));
    CHECK(l.mean == doctest::Approx(1.0).epsilon(0.02));
    CHECK(l.variance == doctest::Approx(2.0).epsilon(0.03));
    CHECK(l.excess_kurtosis == doctest::Approx(3.0).epsilon(0.15));
    for (auto d : {InputDistribution::Gaussian, InputDistribution::Laplace, InputDistribution::Exponential})
        CHECK(parse_distribution(to_string(d)) == d);
    CHECK_THROWS_AS(parse_distribution("cauchy"), ConfigError);
}

TEST_CASE("pipeline density sweep") {
    SweepConfig cfg;
    cfg.seed = 2024;
    const std::vector<NormSpec> specs{NormSpec::layer_norm(), NormSpec::ibnorm(CompressionKind::L, 4.0),
                                      NormSpec::ibnorm(CompressionKind::T, 4.0),
                                      NormSpec::ibnorm(CompressionKind::S, 4.0)};
    const auto results = pipeline_density_sweep(cfg, specs);
    REQUIRE(results.size() == 4);

    const auto &ln = results[0].moments;
    CHECK(std::abs(ln.mean) < 1e-3);
    CHECK(ln.variance == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(std::abs(ln.skewness) < 0.05);
    CHECK(std::abs(ln.excess_kurtosis) < 0.1);

    for (const auto &r : results) {
        CAPTURE(r.spec.label());
        CHECK(std::abs(r.moments.mean) < 1e-3);
        CHECK(std::abs(r.curve.integral() - 1.0) < 0.02);
        CHECK(r.outputs.size() == cfg.n_samples);
    }
    // Tail ordering for the tanh variant.
    CHECK(tail_mass(results[2].outputs, 2.5) <= tail_mass(results[0].outputs, 2.5));

    const auto again = pipeline_density_sweep(cfg, specs);
    for (std::size_t i = 0; i < results.size(); ++i) {
        CHECK(again[i].curve.density == results[i].curve.density);
        CHECK(again[i].curve.to_csv() == results[i].curve.to_csv());
    }
    CHECK(results[0].curve.to_csv().rfind("grid_point,density\n", 0) == 0);

    SweepConfig laplace = cfg;
    laplace.distribution = {InputDistribution::Laplace, 0.0, 1.0};
    laplace.n_samples = 20000;
    for (const auto &r : pipeline_density_sweep(laplace, specs))
        CHECK(std::abs(r.curve.integral() - 1.0) < 0.02);
}

TEST_CASE("normalize_pre_affine ignores the affine flag") {
    const auto xs = gaussian(300, 5);
    auto with = NormSpec::ibnorm(CompressionKind::T, 4.0);
    auto without = with;
    without.affine = false;
    CHECK(normalize_pre_affine(with, xs, 100) == normalize_pre_affine(without, xs, 100));
    CHECK_THROWS_AS(normalize_pre_affine(with, xs, 7), ConfigError);
}
