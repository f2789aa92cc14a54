#include "ibnorm/verify.hpp"

#include "ibnorm/distribution.hpp"
#include "ibnorm/errors.hpp"
#include "ibnorm/grad_check.hpp"
#include "ibnorm/info.hpp"
#include "ibnorm/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

namespace ibn::verify {

nlohmann::json PropertyResult::to_json() const {
    return {{"id", id()}, {"group", group}, {"name", name}, {"passed", passed}, {"witness", witness},
            {"seconds", seconds}};
}

std::vector<NormSpec> grad_check_specs() {
    std::vector<NormSpec> specs{NormSpec::layer_norm(), NormSpec::rms_norm(), NormSpec::batch_norm()};
    for (auto kind : {CompressionKind::S, CompressionKind::L, CompressionKind::T})
        for (auto order : {NormOrder::CompressThenStandardize, NormOrder::StandardizeThenCompress})
            specs.push_back(NormSpec::ibnorm(kind, 4.0, 1e-5, true, order));
    specs.push_back(NormSpec::normal_norm(0.0, 0.5));
    return specs;
}

double norm_grad_error(const NormSpec &spec, std::mt19937_64 &rng, std::size_t rows, std::size_t features) {
    std::normal_distribution<double> n(0.0, 2.0);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::vector<double> xs(rows * features);
    for (bool ok = false; !ok;) {
        for (auto &v : xs)
            v = n(rng);
        ok = true;
        for (std::size_t r = 0; r < rows && ok; ++r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t j = 0; j < features; ++j)
                mu += xs[r * features + j];
            mu /= static_cast<double>(features);
            for (std::size_t j = 0; j < features; ++j)
                var += (xs[r * features + j] - mu) * (xs[r * features + j] - mu);
            const double sd = std::sqrt(var / static_cast<double>(features));
            for (std::size_t j = 0; j < features; ++j)
                ok = ok && std::abs(xs[r * features + j] - mu) / sd > 1e-3;
        }
    }
    std::vector<double> ws(rows * features), gs(features), bs(features);
    for (auto &v : ws)
        v = n(rng);
    for (auto &v : gs)
        v = u(rng);
    for (auto &v : bs)
        v = n(rng);
    const Tensor weights({rows, features}, ws);

    NormLayer layer(spec, features, rng());
    if (layer.affine()) {
        layer.affine()->gamma = Tensor({features}, gs, true);
        layer.affine()->beta = Tensor({features}, bs, true);
    }
    // BatchNorm updates running statistics on every forward; they do not feed
    // back into train-mode outputs, so repeated evaluation is harmless.
    auto project = [&](const Tensor &x) { return sum_all(mul(layer.forward(x), weights)); };

    double worst = grad_check(project, Tensor({rows, features}, xs), 1e-5).max_rel_error;
    if (layer.affine()) {
        const Tensor x({rows, features}, xs);
        for (Tensor *param : {&layer.affine()->gamma, &layer.affine()->beta}) {
            const Tensor original = *param;
            auto r = grad_check(
                [&](const Tensor &p) {
                    *param = p;
                    return project(x);
                },
                original.clone(), 1e-5);
            *param = original;
            worst = std::max(worst, r.max_rel_error);
        }
    }
    return worst;
}

namespace {

using Check = std::function<std::pair<bool, std::string>(const Options &)>;

struct Property {
    std::string group;
    std::string name;
    Check check;
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

constexpr CompressionKind kKinds[] = {CompressionKind::S, CompressionKind::L, CompressionKind::T};
constexpr double kLambdas[] = {1.0, 2.0, 4.0, 8.0};

std::pair<bool, std::string> bounded(const Options &) {
    const auto grid = log_grid(1e-6, 1e3, 200);
    for (auto k : kKinds)
        for (double lam : kLambdas)
            if (auto w = certify_bounded_compression(k, lam, grid))
                return {false, "kind=" + std::string(to_string(k)) + " lambda=" + fmt(lam) + " r=" + fmt(w->r) +
                                   " f=" + fmt(w->value) + " bound=" + fmt(w->bound)};
    return {true, "12 (kind, lambda) pairs x 200 radii"};
}

std::pair<bool, std::string> monotone(const Options &) {
    const auto grid = log_grid(1e-6, 1e3, 200);
    for (auto k : kKinds)
        for (double lam : kLambdas)
            for (std::size_t i = 1; i < grid.size(); ++i)
                if (f_lambda(k, grid[i], lam) < f_lambda(k, grid[i - 1], lam))
                    return {false, "kind=" + std::string(to_string(k)) + " lambda=" + fmt(lam) +
                                       " decreases between r=" + fmt(grid[i - 1]) + " and r=" + fmt(grid[i])};
    return {true, "non-decreasing on the grid"};
}

std::pair<bool, std::string> jacobian(const Options &opt) {
    const auto grid = log_grid(1e-6, 1e3, 200);
    for (auto k : kKinds)
        for (double lam : kLambdas)
            for (double r : grid) {
                try {
                    deviation_jacobian_bound(k, lam, r, opt.derivative);
                } catch (const NumericError &e) {
                    return {false, "kind=" + std::string(to_string(k)) + " lambda=" + fmt(lam) + ": " + e.what()};
                }
            }
    return {true, "f'(r) <= 1/lambda on the grid"};
}

std::pair<bool, std::string> entropy_reduction(const Options &opt) {
    for (auto k : {CompressionKind::L, CompressionKind::T})
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto xs = dist::draw_samples({}, 10000, opt.seed + s);
            const Tensor y = compress(Tensor({xs.size()}, xs), {k, 4.0, xs.size()});
            const double before = dist::knn_entropy(xs), after = dist::knn_entropy(y.data());
            if (after > before)
                return {false, "kind=" + std::string(to_string(k)) + " seed=" + std::to_string(opt.seed + s) +
                                   " H(raw)=" + fmt(before) + " H(compressed)=" + fmt(after)};
        }
    return {true, "k-NN entropy drops for L and T on 5 seeds"};
}

std::pair<bool, std::string> compress_backward(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> n(0.0, 2.0);
    for (auto k : kKinds)
        for (int t = 0; t < 10; ++t) {
            std::vector<double> xs(6), ws(6);
            for (bool ok = false; !ok;) {
                double mu = 0.0;
                for (auto &v : xs)
                    mu += (v = n(rng));
                mu /= 6.0;
                ok = std::all_of(xs.begin(), xs.end(), [&](double v) { return std::abs(v - mu) > 1e-3; });
            }
            for (auto &v : ws)
                v = n(rng);
            const Tensor w({6}, ws);
            const auto r = grad_check([&](const Tensor &x) { return sum_all(mul(compress(x, {k, 4.0, 6}), w)); },
                                      Tensor({6}, xs));
            if (r.max_rel_error > 1e-4)
                return {false, "kind=" + std::string(to_string(k)) + " rel_error=" + fmt(r.max_rel_error) +
                                   " at index " + std::to_string(r.worst_index)};
        }
    return {true, "within 1e-4 of central differences"};
}

std::pair<bool, std::string> norm_gradients(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    for (const auto &spec : grad_check_specs())
        for (int t = 0; t < 5; ++t) {
            const double e = norm_grad_error(spec, rng);
            if (!(e <= 1e-4))
                return {false, spec.label() + " rel_error=" + fmt(e)};
        }
    return {true, std::to_string(grad_check_specs().size()) + " layer configurations within 1e-4"};
}

std::pair<bool, std::string> standardized_moments(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> n(1.0, 3.0);
    for (const auto &base : {NormSpec::layer_norm(1e-12, false),
                             NormSpec::ibnorm(CompressionKind::L, 4.0, 1e-12, false),
                             NormSpec::ibnorm(CompressionKind::T, 4.0, 1e-12, false)}) {
        std::vector<double> xs(8 * 32);
        for (auto &v : xs)
            v = n(rng);
        NormLayer layer(base, 32);
        const Tensor y = layer.forward(Tensor({8, 32}, xs));
        for (std::size_t r = 0; r < 8; ++r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t j = 0; j < 32; ++j)
                mu += y[r * 32 + j];
            mu /= 32.0;
            for (std::size_t j = 0; j < 32; ++j)
                var += (y[r * 32 + j] - mu) * (y[r * 32 + j] - mu);
            var /= 32.0;
            if (std::abs(mu) > 1e-10 || std::abs(var - 1.0) > 1e-8)
                return {false, base.label() + " row " + std::to_string(r) + " mean=" + fmt(mu) + " var=" + fmt(var)};
        }
    }
    return {true, "zero mean and unit variance per group"};
}

std::pair<bool, std::string> linear_equivalence(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> n(0.0, 2.0);
    std::uniform_real_distribution<double> loglam(std::log(0.1), std::log(100.0));
    for (int t = 0; t < 50; ++t) {
        std::vector<double> xs(16);
        for (auto &v : xs)
            v = n(rng);
        const double lam = std::exp(loglam(rng));
        const Tensor x({16}, xs);
        const Tensor a = layer_norm(x, NormSpec::layer_norm(1e-14, false), std::nullopt);
        const Tensor b = ibnorm(x, NormSpec::ibnorm(CompressionKind::S, lam, 1e-14, false), std::nullopt);
        for (std::size_t i = 0; i < 16; ++i)
            if (std::abs(a[i] - b[i]) > 1e-10)
                return {false, "lambda=" + fmt(lam) + " index " + std::to_string(i) + ": " + fmt(a[i]) + " vs " +
                                   fmt(b[i])};
    }
    return {true, "IBNorm-S matches LayerNorm within 1e-10"};
}

info::Batch random_batch(std::mt19937_64 &rng, Eigen::Index n, Eigen::Index d) {
    std::normal_distribution<double> g(0.0, 1.0);
    info::Batch b(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j)
            b(i, j) = g(rng);
    return b;
}

std::pair<bool, std::string> gram_properties(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    for (int t = 0; t < 100; ++t) {
        const auto g = info::gram(random_batch(rng, 2 + t % 15, 5));
        const double asym = (g.entries - g.entries.transpose()).cwiseAbs().maxCoeff();
        const double trace = g.entries.trace();
        if (asym > 1e-12 || std::abs(trace - 1.0) > 1e-12)
            return {false, "trial " + std::to_string(t) + " asymmetry=" + fmt(asym) + " trace=" + fmt(trace)};
        const double h = info::matrix_entropy(g);
        if (h < 0.0 || h > std::log(static_cast<double>(g.n())) + 1e-12)
            return {false, "trial " + std::to_string(t) + " entropy=" + fmt(h) + " outside [0, ln N]"};
    }
    return {true, "symmetric, unit trace, entropy in [0, ln N]"};
}

std::pair<bool, std::string> entropy_anchors(const Options &) {
    info::GramMatrix pure{Eigen::MatrixXd::Constant(5, 5, 0.2), true};
    info::GramMatrix mixed{Eigen::MatrixXd::Identity(4, 4) / 4.0, true};
    const double h0 = info::matrix_entropy(pure), h1 = info::matrix_entropy(mixed);
    if (std::abs(h0) > 1e-10 || std::abs(h1 - std::log(4.0)) > 1e-9)
        return {false, "H(identical)=" + fmt(h0) + " H(I/4)=" + fmt(h1)};
    return {true, "H = 0 and ln 4"};
}

std::pair<bool, std::string> mi_symmetry(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    for (int t = 0; t < 20; ++t) {
        const auto u = random_batch(rng, 12, 4), v = random_batch(rng, 12, 3);
        const double a = info::mutual_information(u, v), b = info::mutual_information(v, u);
        if (std::abs(a - b) > 1e-10)
            return {false, "I(U;V)=" + fmt(a) + " I(V;U)=" + fmt(b)};
        const double masked = info::mutual_information(u, v, 1.0, info::MaskMatrix::all_active(12));
        if (std::abs(masked - a) > 1e-12)
            return {false, "all-active mask changed I from " + fmt(a) + " to " + fmt(masked)};
    }
    return {true, "symmetric; all-active mask is a no-op"};
}

std::pair<bool, std::string> primitive_gradients(const Options &opt) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::vector<std::pair<std::string, std::function<Tensor(const Tensor &)>>> fns{
        {"tanh", [](const Tensor &x) { return tanh(x); }},
        {"exp", [](const Tensor &x) { return exp(scale(x, 0.5)); }},
        {"softmax", [](const Tensor &x) { return softmax_axis(x, -1); }},
        {"var", [](const Tensor &x) { return var_axis(x, -1, true); }},
        {"matmul", [](const Tensor &x) { return matmul(x, transpose(x)); }},
    };
    for (const auto &[name, fn] : fns) {
        std::vector<double> xs(12), ws;
        for (auto &v : xs)
            v = n(rng);
        const Tensor probe = fn(Tensor({3, 4}, xs));
        ws.resize(probe.numel());
        for (auto &v : ws)
            v = n(rng);
        const Tensor w(probe.shape(), ws);
        const auto r = grad_check([&](const Tensor &x) { return sum_all(mul(fn(x), w)); }, Tensor({3, 4}, xs));
        if (r.max_rel_error > 1e-6)
            return {false, name + " rel_error=" + fmt(r.max_rel_error)};
    }
    return {true, "tanh, exp, softmax, var, matmul"};
}

const std::vector<Property> &properties() {
    static const std::vector<Property> all{
        {"compression", "bounded", bounded},
        {"compression", "monotone", monotone},
        {"compression", "jacobian_bound", jacobian},
        {"compression", "entropy_reduction", entropy_reduction},
        {"compression", "backward", compress_backward},
        {"norm", "grad_check", norm_gradients},
        {"norm", "standardized_moments", standardized_moments},
        {"norm", "ibnorm_s_equals_layernorm", linear_equivalence},
        {"info", "gram_properties", gram_properties},
        {"info", "entropy_anchors", entropy_anchors},
        {"info", "mi_symmetry", mi_symmetry},
        {"autodiff", "primitive_grad_check", primitive_gradients},
    };
    return all;
}

} // namespace

std::vector<std::string> property_ids() {
    std::vector<std::string> ids;
    for (const auto &p : properties())
        ids.push_back(p.group + "." + p.name);
    return ids;
}

std::vector<PropertyResult> run(const Options &options) {
    std::vector<PropertyResult> results;
    for (const auto &p : properties()) {
        PropertyResult r;
        r.group = p.group;
        r.name = p.name;
        if (!options.filter.empty() && r.id().find(options.filter) == std::string::npos)
            continue;
        const auto start = std::chrono::steady_clock::now();
        try {
            std::tie(r.passed, r.witness) = p.check(options);
        } catch (const std::exception &e) {
            r.passed = false;
            r.witness = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        results.push_back(std::move(r));
    }
    return results;
}

nlohmann::json report(const std::vector<PropertyResult> &results) {
    nlohmann::json j{{"passed", true}, {"properties", nlohmann::json::array()}};
    for (const auto &r : results) {
        j["properties"].push_back(r.to_json());
        if (!r.passed)
            j["passed"] = false;
    }
    j["count"] = results.size();
    return j;
}

} // namespace ibn::verify
