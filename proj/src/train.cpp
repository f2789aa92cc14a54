#include "ibnorm/train.hpp"

#include "ibnorm/errors.hpp"
#include "ibnorm/log.hpp"
#include "ibnorm/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ibn {

void TrainConfig::validate() const {
    optimizer.validate();
    if (batch_size < 2)
        throw ConfigError("batch_size must be at least 2");
    if (warmup_steps > steps)
        throw ConfigError("warmup_steps must not exceed steps");
    if (eval_interval == 0)
        throw ConfigError("eval_interval must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"seed", seed},
            {"optimizer", optimizer.to_json()},
            {"batch_size", batch_size},
            {"steps", steps},
            {"warmup_steps", warmup_steps},
            {"eval_interval", eval_interval},
            {"eval_rows", eval_rows},
            {"freeze_except_norm", freeze_except_norm},
            {"output_dir", output_dir}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json &j) {
    TrainConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer"))
        c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_rows = j.value("eval_rows", c.eval_rows);
    c.freeze_except_norm = j.value("freeze_except_norm", c.freeze_except_norm);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.validate();
    return c;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

nlohmann::json tensor_dump(const Tensor &t) {
    return {{"shape", t.shape()}, {"values", std::vector<double>(t.data().begin(), t.data().end())}};
}

[[noreturn]] void abort_non_finite(const std::string &dir, std::size_t step, double loss, const Batch &batch,
                                   const std::vector<Tensor> &reps) {
    nlohmann::json dump{{"step", step}, {"loss", std::isnan(loss) ? "nan" : fmt(loss)}};
    auto &b = dump["batch"];
    b["rows"] = batch.rows;
    b["steps"] = batch.steps;
    b["tokens"] = batch.tokens;
    b["targets"] = batch.targets;
    if (batch.features.defined())
        b["features"] = tensor_dump(batch.features);
    auto &acts = dump["activations"] = nlohmann::json::array();
    for (std::size_t l = 0; l < reps.size(); ++l) {
        auto entry = tensor_dump(reps[l]);
        entry["layer"] = l;
        acts.push_back(std::move(entry));
    }
    const auto root = dir.empty() ? std::filesystem::temp_directory_path() : std::filesystem::path(dir);
    const auto path = root / ("nan_dump_step" + std::to_string(step) + ".json");
    // nlohmann refuses NaN as a number, so it is replaced by null in the dump.
    write_file_atomic(path, dump.dump(1, ' ', false, nlohmann::json::error_handler_t::replace));
    throw NumericError("non-finite loss at step " + std::to_string(step) + "; batch and activations written to " +
                       path.string());
}

} // namespace

std::string metrics_csv_header(TaskKind task) {
    return task == TaskKind::CharLM ? "step,train_loss,eval_loss,eval_perplexity"
                                    : "step,train_loss,eval_loss,eval_accuracy";
}

std::string metrics_csv_row(const MetricRow &row) {
    return std::to_string(row.step) + "," + fmt(row.train_loss) + "," + fmt(row.eval_loss) + "," +
           fmt(row.eval_metric);
}

std::string metrics_csv(TaskKind task, const std::vector<MetricRow> &rows) {
    std::string out = metrics_csv_header(task) + "\n";
    for (const auto &r : rows)
        out += metrics_csv_row(r) + "\n";
    return out;
}

nlohmann::json run_config(const ModelSpec &model, const TrainConfig &cfg, const DataSpec &data) {
    return {{"model", model.to_json()}, {"train", cfg.to_json()}, {"data", data.to_json()}};
}

MetricRow evaluate(Model &model, const Batch &batch) {
    NoGradGuard no_grad;
    const auto previous = model.norms().empty() ? NormMode::Eval : model.norms().front().mode();
    model.set_mode(NormMode::Eval);
    const Tensor logits = model.forward(batch);
    model.set_mode(previous);

    MetricRow row;
    row.eval_loss = cross_entropy(logits, batch.targets).item();
    if (model.spec().task == TaskKind::CharLM) {
        row.eval_metric = std::exp(row.eval_loss);
    } else {
        const std::size_t c = logits.shape()[1];
        std::size_t hits = 0;
        for (std::size_t i = 0; i < batch.targets.size(); ++i) {
            const auto row_begin = logits.data().begin() + static_cast<std::ptrdiff_t>(i * c);
            const auto best = static_cast<std::size_t>(std::max_element(row_begin, row_begin + static_cast<std::ptrdiff_t>(c)) - row_begin);
            hits += best == batch.targets[i];
        }
        row.eval_metric = static_cast<double>(hits) / static_cast<double>(batch.targets.size());
    }
    return row;
}

MetricRow evaluate(const Checkpoint &ckpt, const Dataset &data, Split split, std::size_t rows) {
    auto model = restore_model(ckpt);
    const auto &spec = model->spec();
    if (spec.task != data.task() || spec.input_dim != data.input_dim() || spec.output_dim != data.output_dim())
        throw ConfigError("checkpoint model does not match the dataset task or sizes");
    auto row = evaluate(*model, data.head(split, rows));
    row.step = ckpt.step;
    return row;
}

MetricRow evaluate(const Checkpoint &ckpt, Split split, std::size_t rows) {
    if (!ckpt.config.contains("data") || !ckpt.config.contains("train"))
        throw ConfigError("checkpoint config lacks data or train sections");
    const auto data = make_dataset(DataSpec::from_json(ckpt.config.at("data")),
                                   ckpt.config.at("train").value("seed", std::uint64_t{0}));
    return evaluate(ckpt, data, split, rows);
}

void freeze_except_norm(Model &model) {
    for (auto &[name, t] : model.parameters())
        Tensor(t).set_requires_grad(Model::is_norm_parameter(name));
}

void unfreeze_all(Model &model) {
    for (auto &[name, t] : model.parameters())
        Tensor(t).set_requires_grad(true);
}

info::IBTrace probe_ib(Model &model, const Batch &batch, double beta, double sigma, std::size_t timesteps) {
    std::vector<Tensor> reps;
    {
        NoGradGuard no_grad;
        const auto previous = model.norms().empty() ? NormMode::Eval : model.norms().front().mode();
        model.set_mode(NormMode::Eval);
        model.forward(batch, &reps);
        model.set_mode(previous);
    }
    const info::Batch labels = model.label_embeddings(batch);

    std::vector<std::size_t> positions;
    if (batch.steps == 1) {
        positions.push_back(0);
    } else {
        if (timesteps == 0 || timesteps > batch.steps)
            throw ConfigError("probe timesteps must lie in [1, " + std::to_string(batch.steps) + "]");
        for (std::size_t p = 0; p < timesteps; ++p)
            positions.push_back((p + 1) * batch.steps / timesteps - 1);
    }

    auto rows_at = [&](const double *data, std::size_t width, std::size_t t) {
        info::Batch m(static_cast<Eigen::Index>(batch.rows), static_cast<Eigen::Index>(width));
        for (std::size_t b = 0; b < batch.rows; ++b)
            for (std::size_t j = 0; j < width; ++j)
                m(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j)) = data[(b * batch.steps + t) * width + j];
        return m;
    };

    std::vector<info::TimestepReps> steps;
    for (std::size_t t : positions) {
        info::TimestepReps r;
        for (const auto &rep : reps)
            r.layers.push_back(rows_at(rep.data().data(), rep.shape().back(), t));
        info::Batch y(static_cast<Eigen::Index>(batch.rows), labels.cols());
        for (std::size_t b = 0; b < batch.rows; ++b)
            y.row(static_cast<Eigen::Index>(b)) = labels.row(static_cast<Eigen::Index>(b * batch.steps + t));
        r.labels = std::move(y);
        r.mask = info::MaskMatrix::all_active(batch.rows);
        steps.push_back(std::move(r));
    }
    return info::token_ib_value(steps, beta, sigma);
}

TrainResult train(const ModelSpec &spec, const TrainConfig &cfg, const Dataset &data) {
    cfg.validate();
    spec.validate();
    if (spec.task != data.task() || spec.input_dim != data.input_dim() || spec.output_dim != data.output_dim())
        throw ConfigError("model spec does not match the dataset");

    TrainResult result;
    result.model = Model::create(spec, cfg.seed);
    Model &model = *result.model;
    if (cfg.freeze_except_norm)
        freeze_except_norm(model);
    Optimizer optimizer(cfg.optimizer);
    auto data_rng = stream_rng(cfg.seed, Stream::Data);
    const Batch held_out = data.head(Split::Eval, cfg.eval_rows);
    auto config = run_config(spec, cfg, data.spec());
    // Where a run is written does not change what it computes.
    config["train"].erase("output_dir");

    std::ofstream metrics_out, timing_out;
    if (!cfg.output_dir.empty()) {
        std::filesystem::create_directories(cfg.output_dir);
        metrics_out.open(std::filesystem::path(cfg.output_dir) / "metrics.csv", std::ios::trunc);
        timing_out.open(std::filesystem::path(cfg.output_dir) / "timing.csv", std::ios::trunc);
        if (!metrics_out || !timing_out)
            throw IoError("cannot open metric files in '" + cfg.output_dir + "'");
        metrics_out << metrics_csv_header(spec.task) << '\n';
        timing_out << "step,wall_ms\n";
    }

    const auto start = std::chrono::steady_clock::now();
    auto record = [&](std::size_t step, double train_loss) {
        MetricRow row = evaluate(model, held_out);
        row.step = step;
        row.train_loss = train_loss;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        if (metrics_out.is_open()) {
            metrics_out << metrics_csv_row(row) << '\n' << std::flush;
            timing_out << step << ',' << fmt(row.wall_ms) << '\n' << std::flush;
        }
        result.metrics.push_back(row);
    };

    result.batch_hash = kFnvOffset;
    const auto params = model.parameters();
    double last_loss = std::nan("");
    model.set_mode(NormMode::Train);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const Batch batch = data.sample(data_rng, cfg.batch_size);
        result.batch_hash = hash_batch(batch, result.batch_hash);

        Graph graph;
        std::vector<Tensor> reps;
        Tensor loss;
        {
            GraphScope scope(graph);
            loss = cross_entropy(model.forward(batch, &reps), batch.targets);
        }
        last_loss = loss.item();
        if (!std::isfinite(last_loss))
            abort_non_finite(cfg.output_dir, step + 1, last_loss, batch, reps);
        if (graph.size() > 0) {
            const Gradients grads = backward(graph, loss);
            optimizer.step(params, grads, scheduled_lr(cfg.optimizer.learning_rate, step, cfg.warmup_steps, cfg.steps));
        }
        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps)
            record(step + 1, last_loss);
    }
    if (cfg.steps == 0)
        record(0, last_loss);

    result.checkpoint = capture(model, &optimizer, config, cfg.steps);
    std::ostringstream rng_state;
    rng_state << data_rng;
    result.checkpoint.rng["data"] = rng_state.str();

    if (!cfg.output_dir.empty()) {
        const std::filesystem::path dir(cfg.output_dir);
        result.checkpoint.save(dir / "checkpoint.ibn");
        char hash[17];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(result.batch_hash));
        nlohmann::json meta{{"config", config},
                            {"library_version", kLibraryVersion},
                            {"seeds", {{"root", cfg.seed}, {"streams", {"split", "data", "init", "noise"}}}},
                            {"config_digest", result.checkpoint.config_digest()},
                            {"batch_stream_hash", hash},
                            {"steps", cfg.steps}};
        write_file_atomic(dir / "run.json", meta.dump(2) + "\n");
    }
    return result;
}

} // namespace ibn
