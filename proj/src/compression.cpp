#include "ibnorm/compression.hpp"

#include "ibnorm/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace ibn {

std::string_view to_string(CompressionKind kind) {
    switch (kind) {
    case CompressionKind::S:
        return "S";
    case CompressionKind::L:
        return "L";
    case CompressionKind::T:
        return "T";
    }
    return "?";
}

CompressionKind parse_compression_kind(std::string_view name) {
    if (name.size() == 1) {
        switch (std::toupper(static_cast<unsigned char>(name[0]))) {
        case 'S':
            return CompressionKind::S;
        case 'L':
            return CompressionKind::L;
        case 'T':
            return CompressionKind::T;
        }
    }
    throw ConfigError("unknown compression kind '" + std::string(name) + "' (expected S, L or T)");
}

void CompressionParams::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda))
        throw ContractError("compression lambda must be positive and finite");
    if (group_size == 0)
        throw ContractError("compression group_size must be >= 1");
}

double f_lambda(CompressionKind kind, double r, double lambda) {
    if (r < 0.0)
        throw ContractError("f_lambda: negative deviation");
    if (!(lambda > 0.0))
        throw ContractError("f_lambda: lambda must be positive");
    switch (kind) {
    case CompressionKind::S:
        return r / lambda;
    case CompressionKind::L:
        return std::log1p(r / lambda);
    case CompressionKind::T:
        return std::tanh(r / lambda);
    }
    return 0.0;
}

double f_lambda_derivative(CompressionKind kind, double r, double lambda) {
    switch (kind) {
    case CompressionKind::S:
        return 1.0 / lambda;
    case CompressionKind::L:
        return 1.0 / (lambda + r);
    case CompressionKind::T: {
        const double t = std::tanh(r / lambda);
        return (1.0 - t * t) / lambda;
    }
    }
    return 0.0;
}

double compression_ratio(CompressionKind, double lambda) {
    if (!(lambda > 0.0))
        throw ContractError("compression_ratio: lambda must be positive");
    return 1.0 / lambda;
}

std::optional<BoundWitness> certify_bounded_compression(CompressionKind kind, double lambda,
                                                        std::span<const double> grid) {
    const double alpha = compression_ratio(kind, lambda);
    for (double r : grid) {
        const double v = f_lambda(kind, r, lambda);
        const double bound = alpha * r;
        // r/lambda and alpha*r can differ by an ulp; compare against both.
        if (v < 0.0 || (v > bound && v > r / lambda))
            return BoundWitness{r, v, bound};
    }
    return std::nullopt;
}

double deviation_jacobian_bound(CompressionKind kind, double lambda, double r, const DerivativeFn &derivative) {
    if (lambda < 1.0)
        throw ContractError("deviation_jacobian_bound requires lambda >= 1");
    if (r < 0.0)
        throw ContractError("deviation_jacobian_bound: negative deviation");
    const double d = derivative(kind, r, lambda);
    if (!(d <= 1.0 / lambda) || d < 0.0) {
        std::ostringstream os;
        os.precision(17);
        os << "Jacobian bound violated for kind " << to_string(kind) << ": f'(" << r << ") = " << d
           << (d < 0.0 ? " is negative" : " exceeds 1/lambda = ");
        if (!(d < 0.0))
            os << 1.0 / lambda;
        throw NumericError(os.str());
    }
    return d;
}

Tensor compress(const Tensor &x, const CompressionParams &params) {
    params.validate();
    if (x.numel() == 0 || x.dim() == 0)
        throw ContractError("compress: empty slice");
    const std::size_t h = x.shape().back();
    if (h != params.group_size)
        throw DimensionError("compress: slice length " + std::to_string(h) + " != group_size " +
                             std::to_string(params.group_size));
    const std::size_t rows = x.numel() / h;
    const auto kind = params.kind;
    const double lambda = params.lambda;

    std::vector<double> out(x.numel());
    std::vector<double> deriv(x.numel());
    auto xs = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double *row = xs.data() + r * h;
        double mu = 0.0;
        for (std::size_t i = 0; i < h; ++i)
            mu += row[i];
        mu /= static_cast<double>(h);
        for (std::size_t i = 0; i < h; ++i) {
            const double u = row[i] - mu;
            const double mag = f_lambda(kind, std::abs(u), lambda);
            out[r * h + i] = u > 0 ? mu + mag : (u < 0 ? mu - mag : mu);
            // sign(u) f(|u|) has derivative f'(|u|) for u != 0 and the same limit at 0.
            deriv[r * h + i] = f_lambda_derivative(kind, std::abs(u), lambda);
        }
    }

    Tensor result(x.shape(), std::move(out));
    std::vector<Tensor> inputs{x};
    if (!should_record(inputs))
        return result;
    active_graph()->record(
        "compress", std::move(inputs), result,
        [rows, h, deriv = std::move(deriv)](const Tensor &o, std::span<const Tensor> in) {
            if (!in[0].requires_grad())
                return;
            auto g = grad_buffer(in[0]);
            auto go = o.grad();
            const double inv_h = 1.0 / static_cast<double>(h);
            for (std::size_t r = 0; r < rows; ++r) {
                // out_i = mu + F(x_i - mu):  d out_i/d x_j = F'_i (δ_ij - 1/H) + 1/H
                double total_go = 0.0, weighted = 0.0;
                for (std::size_t i = 0; i < h; ++i) {
                    total_go += go[r * h + i];
                    weighted += go[r * h + i] * deriv[r * h + i];
                }
                const double shared = (total_go - weighted) * inv_h;
                for (std::size_t j = 0; j < h; ++j)
                    g[r * h + j] += go[r * h + j] * deriv[r * h + j] + shared;
            }
        });
    return result;
}

std::vector<double> log_grid(double lo, double hi, std::size_t count) {
    if (!(lo > 0.0) || !(hi >= lo) || count == 0)
        throw ContractError("log_grid: need 0 < lo <= hi and count >= 1");
    std::vector<double> grid(count);
    if (count == 1) {
        grid[0] = lo;
        return grid;
    }
    const double a = std::log(lo), b = std::log(hi);
    for (std::size_t i = 0; i < count; ++i)
        grid[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
    grid.front() = lo;
    grid.back() = hi;
    return grid;
}

} // namespace ibn
