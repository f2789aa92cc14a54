#pragma once

#include "ibnorm/model.hpp"
#include "ibnorm/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <span>
#include <string>
#include <map>
#include <vector>

namespace ibn {

enum class OptimizerKind { SgdMomentum, AdamW };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    double learning_rate = 1e-3;
    /// Decoupled for AdamW, L2 for SGD. Only applied to tensors with two or more axes.
    double weight_decay = 0.0;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    nlohmann::json to_json() const;
    static OptimizerConfig from_json(const nlohmann::json &j);
};

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
double scheduled_lr(double base, std::size_t step, std::size_t warmup, std::size_t total);

class Optimizer {
  public:
    explicit Optimizer(OptimizerConfig config);

    /// Updates every parameter that has a gradient in `grads`; others are skipped.
    void step(std::span<const NamedTensor> params, const Gradients &grads, double lr);

    const OptimizerConfig &config() const { return config_; }
    std::size_t steps_taken() const { return t_; }

    /// Moment buffers as "opt.m.<param>" / "opt.v.<param>".
    std::vector<std::pair<std::string, std::vector<double>>> state() const;
    void load_state(std::size_t steps_taken, const std::vector<std::pair<std::string, std::vector<double>>> &state);

  private:
    OptimizerConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

} // namespace ibn
