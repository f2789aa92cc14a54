#pragma once

#include "ibnorm/checkpoint.hpp"
#include "ibnorm/data.hpp"
#include "ibnorm/info.hpp"
#include "ibnorm/model.hpp"
#include "ibnorm/optim.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ibn {

inline constexpr const char *kLibraryVersion = "0.1.0";

struct TrainConfig {
    std::uint64_t seed = 0;
    OptimizerConfig optimizer;
    std::size_t batch_size = 32;
    std::size_t steps = 200;
    std::size_t warmup_steps = 20;
    std::size_t eval_interval = 50;
    /// Rows of the held-out batch (the head of the eval split); 0 means all.
    std::size_t eval_rows = 256;
    bool freeze_except_norm = false;
    /// Where metrics, the checkpoint and run metadata go; empty writes nothing.
    std::string output_dir;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json &j);
};

struct MetricRow {
    std::size_t step = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
    /// Accuracy for classification, perplexity for char LM.
    double eval_metric = 0.0;
    /// Kept out of metrics.csv so that file stays byte-reproducible.
    double wall_ms = 0.0;
};

/// "step,train_loss,eval_loss,eval_accuracy" or "...,eval_perplexity".
std::string metrics_csv_header(TaskKind task);
std::string metrics_csv_row(const MetricRow &row);
std::string metrics_csv(TaskKind task, const std::vector<MetricRow> &rows);

struct TrainResult {
    std::unique_ptr<Model> model;
    std::vector<MetricRow> metrics;
    /// FNV-1a over every training batch in order.
    std::uint64_t batch_hash = 0;
    Checkpoint checkpoint;
};

/// Resolved configuration as stored in checkpoints and run metadata.
nlohmann::json run_config(const ModelSpec &model, const TrainConfig &cfg, const DataSpec &data);

/// Builds the model from the Init stream of cfg.seed, samples batches from the
/// Data stream, and evaluates on the held-out batch every eval_interval steps
/// and after the last step. A non-finite loss aborts with NumericError after
/// writing nan_dump_step<k>.json (batch and layer activations).
TrainResult train(const ModelSpec &model, const TrainConfig &cfg, const Dataset &data);

/// Eval-mode forward without gradient recording. train_loss is left at 0.
MetricRow evaluate(Model &model, const Batch &batch);

/// Rebuilds model and dataset from the checkpoint config.
MetricRow evaluate(const Checkpoint &ckpt, Split split, std::size_t rows = 0);
MetricRow evaluate(const Checkpoint &ckpt, const Dataset &data, Split split, std::size_t rows = 0);

/// Token-level IB trace on `batch`. Char LM uses `timesteps` evenly spaced
/// positions ending at the last one; classification uses one timestep.
info::IBTrace probe_ib(Model &model, const Batch &batch, double beta = 1.0, double sigma = 1.0,
                       std::size_t timesteps = 8);

/// requires_grad=false on every parameter outside the norm layers.
void freeze_except_norm(Model &model);
void unfreeze_all(Model &model);

} // namespace ibn
