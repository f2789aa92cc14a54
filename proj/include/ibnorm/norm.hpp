#pragma once

#include "ibnorm/compression.hpp"
#include "ibnorm/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ibn {

enum class NormKind { LayerNorm, RMSNorm, BatchNorm, NormalNorm, IBNorm };

/// Position of the compression relative to standardization (IBNorm only).
enum class NormOrder { CompressThenStandardize, StandardizeThenCompress };

enum class NormMode { Train, Eval };

std::string_view to_string(NormKind kind);

/// Declarative description of a normalization layer.
struct NormSpec {
    NormKind kind = NormKind::LayerNorm;
    std::optional<CompressionParams> compression;
    double epsilon = 1e-5;
    bool affine = true;
    NormOrder order = NormOrder::CompressThenStandardize;
    /// NormalNorm additive-noise factor ξ.
    double noise_factor = 0.0;
    /// NormalNorm: use this power-transform parameter instead of estimating it.
    std::optional<double> fixed_lambda_hat;
    /// BatchNorm running-statistics momentum.
    double momentum = 0.1;

    /// Throws ConfigError when the invariants of the kind are violated.
    void validate() const;

    /// Short stable name such as "layernorm" or "ibnorm-t(4)*".
    std::string label() const;

    static NormSpec layer_norm(double epsilon = 1e-5, bool affine = true);
    static NormSpec rms_norm(double epsilon = 1e-5, bool affine = true);
    static NormSpec batch_norm(double epsilon = 1e-5, bool affine = true);
    static NormSpec normal_norm(double noise_factor = 0.0, std::optional<double> lambda_hat = std::nullopt,
                                double epsilon = 1e-5, bool affine = true);
    static NormSpec ibnorm(CompressionKind kind, double lambda, double epsilon = 1e-5, bool affine = true,
                           NormOrder order = NormOrder::CompressThenStandardize);
};

/// Learnable NRR parameters, one entry per normalized feature.
struct AffineParams {
    Tensor gamma;
    Tensor beta;

    static AffineParams identity(std::size_t dim, bool requires_grad = true);
};

struct BatchStats {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    NormMode mode = NormMode::Train;

    static BatchStats fresh(std::size_t dim, double momentum = 0.1);
};

using OptionalAffine = std::optional<AffineParams>;

/// ψ over the last axis: (x - mean) / sqrt(var + eps), population variance.
Tensor standardize(const Tensor &x, double epsilon);

/// γ·x + β broadcast along the last axis.
Tensor apply_affine(const Tensor &x, const AffineParams &affine);

Tensor layer_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine);
Tensor rms_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine);

/// Normalizes each feature (last axis) across all leading positions.
/// Train mode updates `stats` and needs at least two rows; eval mode reads it.
Tensor batch_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine, BatchStats &stats);

/// Feature-wise partition → compress → standardize → affine. The compression
/// group is the last axis. With StandardizeThenCompress the middle two swap.
Tensor ibnorm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine);

/// Branchwise Yeo-Johnson-style map g(·; λ̂), differentiable in its input.
/// Throws NumericError on overflow, naming the coordinate.
Tensor power_transform(const Tensor &c, double lambda_hat);

/// Scalar g(x; λ̂).
double power_transform_value(double x, double lambda_hat);

/// Maximum-likelihood λ̂ over [-2, 4] for making `values` Gaussian, by 30
/// golden-section iterations. Returns nullopt if the likelihood is not finite.
std::optional<double> estimate_power_lambda(std::span<const double> values);

/// Standardize → power transform → scaled Gaussian noise → affine. λ̂ and the
/// noise are computed outside the gradient graph. Noise is only added in
/// train mode and when noise_factor > 0.
Tensor normal_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine, std::mt19937_64 &rng,
                   NormMode mode = NormMode::Train);

/// A constructed normalization layer: spec, parameters, and mutable state.
class NormLayer {
  public:
    NormLayer(NormSpec spec, std::size_t feature_dim, std::uint64_t seed = 0);

    Tensor forward(const Tensor &x);

    const NormSpec &spec() const { return spec_; }
    std::size_t feature_dim() const { return feature_dim_; }
    NormMode mode() const { return mode_; }
    void set_mode(NormMode mode);

    OptionalAffine &affine() { return affine_; }
    const OptionalAffine &affine() const { return affine_; }
    BatchStats *batch_stats() { return stats_ ? &*stats_ : nullptr; }

    std::size_t parameter_count() const;
    /// Learnable tensors, named "gamma" and "beta".
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    /// Non-learnable persistent state ("running_mean", "running_var").
    std::vector<std::pair<std::string, Tensor>> buffers() const;

    std::mt19937_64 &rng() { return rng_; }

  private:
    NormSpec spec_;
    std::size_t feature_dim_;
    NormMode mode_ = NormMode::Train;
    OptionalAffine affine_;
    std::optional<BatchStats> stats_;
    std::mt19937_64 rng_;
};

/// Validates `spec` and constructs the layer with γ = 1, β = 0.
NormLayer build_norm(const NormSpec &spec, std::size_t feature_dim, std::uint64_t seed = 0);

/// Parses names such as "layernorm", "rmsnorm", "batchnorm", "normalnorm",
/// "ibnorm-s", "ibnorm-l", "ibnorm-t". Throws ConfigError on unknown names.
NormSpec parse_norm_name(std::string_view name, double lambda = 4.0);

} // namespace ibn
