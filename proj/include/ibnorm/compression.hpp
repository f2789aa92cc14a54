#pragma once

#include "ibnorm/tensor.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace ibn {

/// Shape of the deviation map f_λ: S linear, L logarithmic, T hyperbolic tangent.
enum class CompressionKind { S, L, T };

std::string_view to_string(CompressionKind kind);
/// Accepts "S"/"L"/"T" in either case; throws ConfigError otherwise.
CompressionKind parse_compression_kind(std::string_view name);

struct CompressionParams {
    CompressionKind kind = CompressionKind::L;
    double lambda = 4.0;
    /// Number of elements sharing one mean (the last axis of the operand).
    std::size_t group_size = 1;

    /// Throws ContractError on lambda <= 0 or group_size == 0.
    void validate() const;
    /// The bound 0 <= f(r) <= r/lambda only holds for lambda >= 1.
    bool certified() const { return lambda >= 1.0; }
};

/// f_λ(r) for r >= 0.
double f_lambda(CompressionKind kind, double r, double lambda);

/// d f_λ / dr.
double f_lambda_derivative(CompressionKind kind, double r, double lambda);

/// sup_r f_λ(r)/r, which is 1/lambda for every kind.
double compression_ratio(CompressionKind kind, double lambda);

struct BoundWitness {
    double r = 0.0;
    double value = 0.0;
    double bound = 0.0;
};

/// First grid point violating 0 <= f_λ(r) <= compression_ratio * r, if any.
std::optional<BoundWitness> certify_bounded_compression(CompressionKind kind, double lambda,
                                                        std::span<const double> grid);

using DerivativeFn = std::function<double(CompressionKind, double r, double lambda)>;

/// f_λ'(r), checked against 1/lambda. Requires lambda >= 1. Throws NumericError
/// with the witness when the derivative rule exceeds the bound.
double deviation_jacobian_bound(CompressionKind kind, double lambda, double r,
                                const DerivativeFn &derivative = f_lambda_derivative);

/// Pulls each element toward its row mean:
///   out_i = mu + sign(x_i - mu) * f_λ(|x_i - mu|),  mu = mean of the row.
/// Rows are the slices along the last axis, whose length must equal
/// params.group_size. The backward rule includes d mu / d x_j = 1/H.
Tensor compress(const Tensor &x, const CompressionParams &params);

/// `count` points log-spaced over [lo, hi].
std::vector<double> log_grid(double lo, double hi, std::size_t count);

} // namespace ibn
