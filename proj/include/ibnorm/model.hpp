#pragma once

#include "ibnorm/data.hpp"
#include "ibnorm/info.hpp"
#include "ibnorm/norm.hpp"
#include "ibnorm/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ibn {

enum class Topology { Mlp, TinyTransformer };

std::string_view to_string(Topology topology);
Topology parse_topology(std::string_view name);

nlohmann::json norm_spec_to_json(const NormSpec &spec);
NormSpec norm_spec_from_json(const nlohmann::json &j);

struct ModelSpec {
    Topology topology = Topology::Mlp;
    /// Hidden widths of the MLP; a norm follows each hidden linear layer.
    std::vector<std::size_t> layer_widths{128, 128, 128};
    std::size_t n_blocks = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t context = 64;
    /// Applied at every normalization site.
    NormSpec norm;
    TaskKind task = TaskKind::SyntheticClassification;
    /// Features (classification) or vocabulary size (char LM).
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json &j);

    /// Defaults for the task with input/output sizes taken from `data`.
    static ModelSpec for_dataset(const Dataset &data, NormSpec norm);
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class Model {
  public:
    virtual ~Model() = default;

    /// Weights from the Init stream of `seed`; NormalNorm noise from its Noise stream.
    static std::unique_ptr<Model> create(const ModelSpec &spec, std::uint64_t seed);

    const ModelSpec &spec() const { return spec_; }

    /// Logits with one row per target. When `reps` is given it receives T_0
    /// (the input representation) followed by every norm output, each with
    /// one row per target position.
    virtual Tensor forward(const Batch &batch, std::vector<Tensor> *reps = nullptr) = 0;

    /// Label embeddings Y for the targets of `batch`, one row per target.
    virtual info::Batch label_embeddings(const Batch &batch) const = 0;

    /// Backbone parameters followed by norm parameters ("norm<i>.gamma").
    std::vector<NamedTensor> parameters() const;
    std::vector<NamedTensor> buffers() const;
    static bool is_norm_parameter(const std::string &name);

    std::vector<NormLayer> &norms() { return norms_; }
    void set_mode(NormMode mode);

  protected:
    explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
    /// Registers a trainable backbone tensor and returns a handle to it.
    Tensor add_parameter(std::string name, Tensor value);
    void add_norm(std::size_t dim, std::uint64_t seed);

    ModelSpec spec_;
    std::vector<NamedTensor> backbone_;
    std::vector<NormLayer> norms_;
};

} // namespace ibn
