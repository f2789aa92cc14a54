#include "ibnorm/norm.hpp"

#include "ibnorm/errors.hpp"
#include "ibnorm/log.hpp"
#include "ibnorm/ops.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>

namespace ibn {

std::string_view to_string(NormKind kind) {
    switch (kind) {
    case NormKind::LayerNorm:
        return "layernorm";
    case NormKind::RMSNorm:
        return "rmsnorm";
    case NormKind::BatchNorm:
        return "batchnorm";
    case NormKind::NormalNorm:
        return "normalnorm";
    case NormKind::IBNorm:
        return "ibnorm";
    }
    return "?";
}

void NormSpec::validate() const {
    if (!(epsilon > 0.0))
        throw ConfigError("norm epsilon must be positive");
    if (kind == NormKind::IBNorm) {
        if (!compression)
            throw ConfigError("IBNorm requires compression parameters");
        try {
            compression->validate();
        } catch (const ContractError &e) {
            throw ConfigError(e.what());
        }
    } else {
        if (compression)
            throw ConfigError(std::string(to_string(kind)) + " does not take compression parameters");
        if (order != NormOrder::CompressThenStandardize)
            throw ConfigError("standardize-then-compress order only applies to IBNorm");
    }
    if (noise_factor < 0.0)
        throw ConfigError("noise factor must be non-negative");
    if (kind == NormKind::BatchNorm && !(momentum > 0.0 && momentum <= 1.0))
        throw ConfigError("batchnorm momentum must be in (0, 1]");
}

std::string NormSpec::label() const {
    std::ostringstream os;
    os << to_string(kind);
    if (kind == NormKind::IBNorm && compression) {
        os << '-' << static_cast<char>(std::tolower(to_string(compression->kind)[0])) << '(' << compression->lambda
           << ')';
        if (order == NormOrder::StandardizeThenCompress)
            os << '*';
    }
    if (!affine)
        os << "**";
    return os.str();
}

NormSpec NormSpec::layer_norm(double epsilon, bool affine) {
    NormSpec s;
    s.kind = NormKind::LayerNorm;
    s.epsilon = epsilon;
    s.affine = affine;
    return s;
}

NormSpec NormSpec::rms_norm(double epsilon, bool affine) {
    NormSpec s = layer_norm(epsilon, affine);
    s.kind = NormKind::RMSNorm;
    return s;
}

NormSpec NormSpec::batch_norm(double epsilon, bool affine) {
    NormSpec s = layer_norm(epsilon, affine);
    s.kind = NormKind::BatchNorm;
    return s;
}

NormSpec NormSpec::normal_norm(double noise_factor, std::optional<double> lambda_hat, double epsilon, bool affine) {
    NormSpec s = layer_norm(epsilon, affine);
    s.kind = NormKind::NormalNorm;
    s.noise_factor = noise_factor;
    s.fixed_lambda_hat = lambda_hat;
    return s;
}

NormSpec NormSpec::ibnorm(CompressionKind kind, double lambda, double epsilon, bool affine, NormOrder order) {
    NormSpec s = layer_norm(epsilon, affine);
    s.kind = NormKind::IBNorm;
    s.compression = CompressionParams{kind, lambda, 1};
    s.order = order;
    return s;
}

AffineParams AffineParams::identity(std::size_t dim, bool requires_grad) {
    return {Tensor::full({dim}, 1.0, requires_grad), Tensor::zeros({dim}, requires_grad)};
}

BatchStats BatchStats::fresh(std::size_t dim, double momentum) {
    return {Tensor::zeros({dim}), Tensor::full({dim}, 1.0), momentum, NormMode::Train};
}

namespace {

Tensor bcast(const Tensor &t, const Tensor &like) { return broadcast_to(t, like.shape()); }

Tensor finish_affine(const Tensor &y, const NormSpec &spec, const OptionalAffine &affine) {
    if (!spec.affine)
        return y;
    if (!affine)
        throw ContractError(std::string(to_string(spec.kind)) + ": affine enabled but no parameters given");
    return apply_affine(y, *affine);
}

void require_features(const Tensor &x) {
    if (x.dim() == 0 || x.shape().back() == 0)
        throw DimensionError("normalization needs a non-empty last axis");
}

} // namespace

Tensor standardize(const Tensor &x, double epsilon) {
    require_features(x);
    Tensor centered = sub(x, bcast(mean_axis(x, -1, true), x));
    Tensor denom = sqrt(add_scalar(var_axis(x, -1, true), epsilon));
    return div(centered, bcast(denom, x));
}

Tensor apply_affine(const Tensor &x, const AffineParams &affine) {
    const std::size_t d = x.shape().back();
    if (affine.gamma.shape() != Shape{d} || affine.beta.shape() != Shape{d})
        throw DimensionError("affine parameters " + shape_str(affine.gamma.shape()) + " do not match features " +
                             std::to_string(d));
    return add(mul(x, bcast(affine.gamma, x)), bcast(affine.beta, x));
}

Tensor layer_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine) {
    return finish_affine(standardize(x, spec.epsilon), spec, affine);
}

Tensor rms_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine) {
    require_features(x);
    Tensor ms = mean_axis(mul(x, x), -1, true);
    Tensor y = div(x, bcast(sqrt(add_scalar(ms, spec.epsilon)), x));
    return finish_affine(y, spec, affine);
}

Tensor batch_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine, BatchStats &stats) {
    require_features(x);
    const std::size_t f = x.shape().back();
    const std::size_t rows = x.numel() / f;
    Tensor flat = reshape(x, {rows, f});
    Tensor y;
    if (stats.mode == NormMode::Train) {
        if (rows < 2)
            throw ContractError("batch_norm in train mode needs a batch of at least 2");
        Tensor mean = mean_axis(flat, 0, true);
        Tensor var = var_axis(flat, 0, true);
        y = div(sub(flat, bcast(mean, flat)), bcast(sqrt(add_scalar(var, spec.epsilon)), flat));

        const double m = stats.momentum;
        const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
        auto rm = stats.running_mean.mutable_data();
        auto rv = stats.running_var.mutable_data();
        for (std::size_t j = 0; j < f; ++j) {
            rm[j] = (1.0 - m) * rm[j] + m * mean[j];
            rv[j] = (1.0 - m) * rv[j] + m * var[j] * unbias;
        }
    } else {
        Tensor mean = reshape(stats.running_mean.detach(), {1, f});
        Tensor denom = reshape(stats.running_var.detach(), {1, f});
        std::vector<double> sd(f);
        for (std::size_t j = 0; j < f; ++j)
            sd[j] = std::sqrt(denom[j] + spec.epsilon);
        y = div(sub(flat, bcast(mean, flat)), bcast(Tensor({1, f}, std::move(sd)), flat));
    }
    return finish_affine(reshape(y, x.shape()), spec, affine);
}

Tensor ibnorm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine) {
    if (spec.kind != NormKind::IBNorm)
        throw ContractError("ibnorm called with a non-IBNorm spec");
    if (!spec.compression)
        throw ContractError("ibnorm requires compression parameters");
    require_features(x);
    CompressionParams params = *spec.compression;
    params.group_size = x.shape().back();
    Tensor y = spec.order == NormOrder::CompressThenStandardize
                   ? standardize(compress(x, params), spec.epsilon)
                   : compress(standardize(x, spec.epsilon), params);
    return finish_affine(y, spec, affine);
}

double power_transform_value(double x, double lambda_hat) {
    if (x >= 0.0) {
        if (lambda_hat != 0.0)
            return (std::pow(x + 1.0, lambda_hat) - 1.0) / lambda_hat;
        return std::log1p(x);
    }
    if (lambda_hat != 2.0)
        return -(std::pow(-x + 1.0, 2.0 - lambda_hat) - 1.0) / (2.0 - lambda_hat);
    return -std::log1p(-x);
}

namespace {
double power_transform_derivative(double x, double lambda_hat) {
    if (x >= 0.0)
        return std::pow(x + 1.0, lambda_hat - 1.0);
    return std::pow(-x + 1.0, 1.0 - lambda_hat);
}
} // namespace

Tensor power_transform(const Tensor &c, double lambda_hat) {
    if (!std::isfinite(lambda_hat))
        throw ContractError("power_transform: lambda must be finite");
    std::vector<double> out(c.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = power_transform_value(c[i], lambda_hat);
        if (!std::isfinite(out[i]))
            throw NumericError("power_transform: saturated at coordinate " + std::to_string(i));
    }
    Tensor result(c.shape(), std::move(out));
    std::vector<Tensor> inputs{c};
    if (should_record(inputs))
        active_graph()->record("power_transform", std::move(inputs), result,
                               [lambda_hat](const Tensor &o, std::span<const Tensor> in) {
                                   if (!in[0].requires_grad())
                                       return;
                                   auto g = grad_buffer(in[0]);
                                   auto go = o.grad();
                                   auto xv = in[0].data();
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += go[i] * power_transform_derivative(xv[i], lambda_hat);
                               });
    return result;
}

std::optional<double> estimate_power_lambda(std::span<const double> values) {
    const auto n = static_cast<double>(values.size());
    if (values.size() < 2)
        return std::nullopt;
    double log_jacobian_base = 0.0;
    for (double v : values)
        log_jacobian_base += (v >= 0 ? 1.0 : -1.0) * std::log1p(std::abs(v));

    auto loglik = [&](double lam) {
        double mean = 0.0;
        std::vector<double> t(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            t[i] = power_transform_value(values[i], lam);
            mean += t[i];
        }
        mean /= n;
        double var = 0.0;
        for (double v : t)
            var += (v - mean) * (v - mean);
        var /= n;
        if (!(var > 0.0) || !std::isfinite(var))
            return -std::numeric_limits<double>::infinity();
        return -0.5 * n * std::log(var) + (lam - 1.0) * log_jacobian_base;
    };

    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = -2.0, hi = 4.0;
    double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    double fa = loglik(a), fb = loglik(b);
    for (int it = 0; it < 30; ++it) {
        if (fa > fb) {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = loglik(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = loglik(b);
        }
    }
    const double best = 0.5 * (lo + hi);
    if (!std::isfinite(loglik(best)))
        return std::nullopt;
    return best;
}

Tensor normal_norm(const Tensor &x, const NormSpec &spec, const OptionalAffine &affine, std::mt19937_64 &rng,
                   NormMode mode) {
    if (spec.kind != NormKind::NormalNorm)
        throw ContractError("normal_norm called with a non-NormalNorm spec");
    Tensor c = standardize(x, spec.epsilon);
    const std::size_t h = c.shape().back();
    const std::size_t rows = c.numel() / h;

    // One λ̂ per normalization group, estimated without gradient tracking.
    std::vector<double> lambdas(rows, spec.fixed_lambda_hat.value_or(1.0));
    if (!spec.fixed_lambda_hat) {
        for (std::size_t r = 0; r < rows; ++r) {
            auto est = estimate_power_lambda(c.data().subspan(r * h, h));
            if (est) {
                lambdas[r] = *est;
            } else {
                log_warning("normal_norm: power-lambda estimation failed for group " + std::to_string(r) +
                            ", using 1");
            }
        }
    }

    Tensor transformed;
    if (std::all_of(lambdas.begin(), lambdas.end(), [&](double l) { return l == lambdas[0]; })) {
        transformed = power_transform(c, lambdas[0]);
    } else {
        // Distinct λ̂ per row: transform rows separately and stitch back.
        std::vector<double> merged(c.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            auto slice = c.data().subspan(r * h, h);
            for (std::size_t i = 0; i < h; ++i)
                merged[r * h + i] = power_transform_value(slice[i], lambdas[r]);
        }
        for (double v : merged)
            if (!std::isfinite(v))
                throw NumericError("power_transform: saturated in normal_norm");
        Tensor result(c.shape(), std::move(merged));
        std::vector<Tensor> inputs{c};
        if (should_record(inputs))
            active_graph()->record("power_transform_rows", std::move(inputs), result,
                                   [lambdas, h](const Tensor &o, std::span<const Tensor> in) {
                                       if (!in[0].requires_grad())
                                           return;
                                       auto g = grad_buffer(in[0]);
                                       auto go = o.grad();
                                       auto xv = in[0].data();
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                           g[i] += go[i] * power_transform_derivative(xv[i], lambdas[i / h]);
                                   });
        transformed = result;
    }

    Tensor v = transformed;
    if (mode == NormMode::Train && spec.noise_factor > 0.0) {
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> noise(c.numel());
        auto t = transformed.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double mean = 0.0;
            for (std::size_t i = 0; i < h; ++i)
                mean += t[r * h + i];
            mean /= static_cast<double>(h);
            double mad = 0.0;
            for (std::size_t i = 0; i < h; ++i)
                mad += std::abs(t[r * h + i] - mean);
            mad /= static_cast<double>(h);
            for (std::size_t i = 0; i < h; ++i)
                noise[r * h + i] = normal(rng) * mad * spec.noise_factor;
        }
        v = add(transformed, Tensor(c.shape(), std::move(noise)));
    }
    return finish_affine(v, spec, affine);
}

// --- layer -------------------------------------------------------------------

NormLayer::NormLayer(NormSpec spec, std::size_t feature_dim, std::uint64_t seed)
    : spec_(std::move(spec)), feature_dim_(feature_dim), rng_(seed) {
    spec_.validate();
    if (feature_dim_ == 0)
        throw ConfigError("norm feature dimension must be positive");
    if (spec_.compression)
        spec_.compression->group_size = feature_dim_;
    if (spec_.affine)
        affine_ = AffineParams::identity(feature_dim_);
    if (spec_.kind == NormKind::BatchNorm)
        stats_ = BatchStats::fresh(feature_dim_, spec_.momentum);
}

void NormLayer::set_mode(NormMode mode) {
    mode_ = mode;
    if (stats_)
        stats_->mode = mode;
}

Tensor NormLayer::forward(const Tensor &x) {
    if (x.dim() == 0 || x.shape().back() != feature_dim_)
        throw DimensionError("norm layer expects last axis " + std::to_string(feature_dim_) + ", got " +
                             shape_str(x.shape()));
    switch (spec_.kind) {
    case NormKind::LayerNorm:
        return layer_norm(x, spec_, affine_);
    case NormKind::RMSNorm:
        return rms_norm(x, spec_, affine_);
    case NormKind::BatchNorm:
        return batch_norm(x, spec_, affine_, *stats_);
    case NormKind::NormalNorm:
        return normal_norm(x, spec_, affine_, rng_, mode_);
    case NormKind::IBNorm:
        return ibnorm(x, spec_, affine_);
    }
    throw ConfigError("unknown norm kind");
}

std::size_t NormLayer::parameter_count() const { return affine_ ? 2 * feature_dim_ : 0; }

std::vector<std::pair<std::string, Tensor>> NormLayer::parameters() const {
    if (!affine_)
        return {};
    return {{"gamma", affine_->gamma}, {"beta", affine_->beta}};
}

std::vector<std::pair<std::string, Tensor>> NormLayer::buffers() const {
    if (!stats_)
        return {};
    return {{"running_mean", stats_->running_mean}, {"running_var", stats_->running_var}};
}

NormLayer build_norm(const NormSpec &spec, std::size_t feature_dim, std::uint64_t seed) {
    return NormLayer(spec, feature_dim, seed);
}

NormSpec parse_norm_name(std::string_view name, double lambda) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "layernorm" || lower == "ln")
        return NormSpec::layer_norm();
    if (lower == "rmsnorm")
        return NormSpec::rms_norm();
    if (lower == "batchnorm" || lower == "bn")
        return NormSpec::batch_norm();
    if (lower == "normalnorm")
        return NormSpec::normal_norm();
    if (lower.rfind("ibnorm-", 0) == 0 && lower.size() == 8)
        return NormSpec::ibnorm(parse_compression_kind(lower.substr(7)), lambda);
    throw ConfigError("unknown norm '" + std::string(name) + "'");
}

} // namespace ibn
