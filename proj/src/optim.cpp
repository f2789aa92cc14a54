#include "ibnorm/optim.hpp"

#include "ibnorm/errors.hpp"

#include <cmath>
#include <numbers>

namespace ibn {

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::AdamW ? "adamw" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "adamw")
        return OptimizerKind::AdamW;
    if (name == "sgd_momentum" || name == "sgd")
        return OptimizerKind::SgdMomentum;
    throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning rate must be finite and non-negative");
    if (!(weight_decay >= 0.0))
        throw ConfigError("weight decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw ConfigError("momentum must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0))
        throw ConfigError("adam epsilon must be positive");
}

nlohmann::json OptimizerConfig::to_json() const {
    return {{"kind", to_string(kind)},     {"learning_rate", learning_rate}, {"weight_decay", weight_decay},
            {"momentum", momentum},        {"beta1", beta1},                 {"beta2", beta2},
            {"adam_eps", adam_eps}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json &j) {
    OptimizerConfig c;
    c.kind = parse_optimizer(j.value("kind", std::string("adamw")));
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.momentum = j.value("momentum", c.momentum);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.validate();
    return c;
}

double scheduled_lr(double base, std::size_t step, std::size_t warmup, std::size_t total) {
    if (step < warmup)
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup)
        return base;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(std::span<const NamedTensor> params, const Gradients &grads, double lr) {
    ++t_;
    const auto &c = config_;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
    for (const auto &[name, tensor] : params) {
        if (!grads.contains(tensor))
            continue;
        auto g = grads.of(tensor);
        auto p = Tensor(tensor).mutable_data();
        const double wd = tensor.dim() >= 2 ? c.weight_decay : 0.0;
        auto &m = m_[name];
        m.resize(p.size(), 0.0);
        if (c.kind == OptimizerKind::SgdMomentum) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = c.momentum * m[i] + g[i] + wd * p[i];
                p[i] -= lr * m[i];
            }
            continue;
        }
        auto &v = v_[name];
        v.resize(p.size(), 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] -= lr * wd * p[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
        }
    }
}

std::vector<std::pair<std::string, std::vector<double>>> Optimizer::state() const {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (const auto &[name, m] : m_)
        out.emplace_back("opt.m." + name, m);
    for (const auto &[name, v] : v_)
        out.emplace_back("opt.v." + name, v);
    return out;
}

void Optimizer::load_state(std::size_t steps_taken,
                           const std::vector<std::pair<std::string, std::vector<double>>> &state) {
    t_ = steps_taken;
    m_.clear();
    v_.clear();
    for (const auto &[key, values] : state) {
        if (key.rfind("opt.m.", 0) == 0)
            m_[key.substr(6)] = values;
        else if (key.rfind("opt.v.", 0) == 0)
            v_[key.substr(6)] = values;
        else
            throw IoError("unexpected optimizer state '" + key + "'");
    }
}

} // namespace ibn
