#pragma once

#include "ibnorm/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ibn {

enum class TaskKind { SyntheticClassification, CharLM };

std::string_view to_string(TaskKind task);
TaskKind parse_task(std::string_view name);

/// Independent RNG streams derived from one root seed. Adding a consumer to
/// one stream never shifts the draws of another.
enum class Stream : std::uint64_t { Split = 1, Data = 2, Init = 3, Noise = 4 };

std::mt19937_64 stream_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0);

struct DataSpec {
    TaskKind task = TaskKind::SyntheticClassification;

    // synthetic_classification
    std::size_t classes = 4;
    std::size_t dims = 16;
    std::size_t train_size = 4096;
    std::size_t eval_size = 1024;
    /// Distance between any two class means, in units of the noise SD.
    double separation = 5.0;

    // char_lm
    std::string text_path;
    std::size_t context = 64;
    double eval_fraction = 0.1;

    void validate() const;
    nlohmann::json to_json() const;
    static DataSpec from_json(const nlohmann::json &j);
};

/// One minibatch. Classification: `features` is [rows, dims] and `targets` has
/// one label per row. Char LM: `tokens` and `targets` are [rows * steps] ids.
struct Batch {
    std::size_t rows = 0;
    std::size_t steps = 1;
    Tensor features;
    std::vector<std::size_t> tokens;
    std::vector<std::size_t> targets;
};

/// FNV-1a over the batch contents, folded into `state`.
std::uint64_t hash_batch(const Batch &batch, std::uint64_t state);

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
std::uint64_t fnv1a(const void *data, std::size_t size, std::uint64_t state = kFnvOffset);

enum class Split { Train, Eval };

class Dataset {
  public:
    TaskKind task() const { return spec_.task; }
    const DataSpec &spec() const { return spec_; }
    /// Feature count (classification) or vocabulary size (char LM).
    std::size_t input_dim() const;
    /// Class count or vocabulary size.
    std::size_t output_dim() const;
    std::size_t size(Split split) const;

    /// Uniform draw with replacement from the training split.
    Batch sample(std::mt19937_64 &rng, std::size_t batch_size) const;
    /// The first `rows` examples of a split in stored order (all if rows is 0).
    Batch head(Split split, std::size_t rows = 0) const;

    const std::vector<char32_t> &vocabulary() const { return vocab_; }

    friend Dataset make_dataset(const DataSpec &spec, std::uint64_t seed);

  private:
    Batch gather(Split split, std::span<const std::size_t> indices) const;

    DataSpec spec_;
    // classification: row-major points and labels per split
    std::vector<double> x_[2];
    std::vector<std::size_t> y_[2];
    // char LM: token ids of the whole text and window starts per split
    std::vector<std::size_t> ids_;
    std::vector<std::size_t> windows_[2];
    std::vector<char32_t> vocab_;
};

/// Throws IoError if the text cannot be read, is empty, or is not UTF-8.
Dataset make_dataset(const DataSpec &spec, std::uint64_t seed);

std::vector<char32_t> decode_utf8(std::string_view bytes);

} // namespace ibn
