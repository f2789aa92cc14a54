#pragma once

#include "ibnorm/model.hpp"
#include "ibnorm/optim.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace ibn {

struct CheckpointArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// Single-file snapshot: the magic "IBNCKPT1", a little-endian u64 header
/// length, a JSON header (config, digest, step, rng states, array names and
/// shapes), then the arrays as raw little-endian f64 in header order.
struct Checkpoint {
    nlohmann::json config;
    std::uint64_t step = 0;
    /// Serialized engine states keyed by stream name.
    nlohmann::json rng = nlohmann::json::object();
    std::vector<CheckpointArray> arrays;

    /// FNV-1a of the compact config dump, as 16 hex digits.
    std::string config_digest() const;
    const CheckpointArray *find(std::string_view name) const;

    std::string serialize() const;
    /// Throws IoError on a bad magic, truncated data, or a digest mismatch.
    static Checkpoint deserialize(std::string_view bytes);

    /// Writes through a temporary file and a rename.
    void save(const std::filesystem::path &path) const;
    static Checkpoint load(const std::filesystem::path &path);
};

/// Parameters, buffers, optimizer moments and NormalNorm noise states.
Checkpoint capture(const Model &model, const Optimizer *optimizer, nlohmann::json config, std::uint64_t step);

/// Copies arrays into an existing model. Every parameter and buffer must be
/// present with a matching shape.
void load_into(Model &model, const Checkpoint &ckpt);

/// Rebuilds the model described by config["model"] and loads its arrays.
std::unique_ptr<Model> restore_model(const Checkpoint &ckpt);

/// Writes `contents` to `path` through a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path &path, std::string_view contents);

} // namespace ibn
