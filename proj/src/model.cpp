#include "ibnorm/model.hpp"

#include "ibnorm/errors.hpp"
#include "ibnorm/ops.hpp"

#include <cmath>
#include <numeric>

namespace ibn {

std::string_view to_string(Topology topology) {
    return topology == Topology::Mlp ? "mlp" : "tiny_transformer";
}

Topology parse_topology(std::string_view name) {
    if (name == "mlp")
        return Topology::Mlp;
    if (name == "tiny_transformer")
        return Topology::TinyTransformer;
    throw ConfigError("unknown topology '" + std::string(name) + "'");
}

namespace {

NormKind parse_norm_kind(const std::string &s) {
    for (auto k : {NormKind::LayerNorm, NormKind::RMSNorm, NormKind::BatchNorm, NormKind::NormalNorm, NormKind::IBNorm})
        if (to_string(k) == s)
            return k;
    throw ConfigError("unknown norm kind '" + s + "'");
}

} // namespace

nlohmann::json norm_spec_to_json(const NormSpec &spec) {
    nlohmann::json j{{"kind", to_string(spec.kind)},
                     {"epsilon", spec.epsilon},
                     {"affine", spec.affine},
                     {"label", spec.label()}};
    if (spec.compression) {
        j["compression"] = to_string(spec.compression->kind);
        j["lambda"] = spec.compression->lambda;
        j["order"] = spec.order == NormOrder::CompressThenStandardize ? "compress_first" : "standardize_first";
    }
    if (spec.kind == NormKind::NormalNorm) {
        j["noise_factor"] = spec.noise_factor;
        j["fixed_lambda_hat"] = spec.fixed_lambda_hat ? nlohmann::json(*spec.fixed_lambda_hat) : nlohmann::json();
    }
    if (spec.kind == NormKind::BatchNorm)
        j["momentum"] = spec.momentum;
    return j;
}

NormSpec norm_spec_from_json(const nlohmann::json &j) {
    NormSpec s;
    s.kind = parse_norm_kind(j.at("kind").get<std::string>());
    s.epsilon = j.value("epsilon", s.epsilon);
    s.affine = j.value("affine", s.affine);
    if (j.contains("compression")) {
        CompressionParams c;
        c.kind = parse_compression_kind(j.at("compression").get<std::string>());
        c.lambda = j.at("lambda").get<double>();
        s.compression = c;
        const auto order = j.value("order", std::string("compress_first"));
        if (order != "compress_first" && order != "standardize_first")
            throw ConfigError("unknown norm order '" + order + "'");
        s.order = order == "compress_first" ? NormOrder::CompressThenStandardize : NormOrder::StandardizeThenCompress;
    }
    s.noise_factor = j.value("noise_factor", s.noise_factor);
    if (j.contains("fixed_lambda_hat") && !j.at("fixed_lambda_hat").is_null())
        s.fixed_lambda_hat = j.at("fixed_lambda_hat").get<double>();
    s.momentum = j.value("momentum", s.momentum);
    s.validate();
    return s;
}

void ModelSpec::validate() const {
    norm.validate();
    if (input_dim == 0 || output_dim == 0)
        throw ConfigError("model input and output sizes must be set");
    if (topology == Topology::Mlp) {
        if (layer_widths.empty())
            throw ConfigError("mlp needs at least one hidden layer");
        for (auto w : layer_widths)
            if (w == 0)
                throw ConfigError("mlp widths must be positive");
        if (task != TaskKind::SyntheticClassification)
            throw ConfigError("mlp supports synthetic_classification only");
    } else {
        if (n_blocks == 0 || d_model == 0 || n_heads == 0 || context == 0)
            throw ConfigError("transformer sizes must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if (task != TaskKind::CharLM)
            throw ConfigError("tiny_transformer supports char_lm only");
    }
}

nlohmann::json ModelSpec::to_json() const {
    nlohmann::json j{{"topology", to_string(topology)},
                     {"task", to_string(task)},
                     {"input_dim", input_dim},
                     {"output_dim", output_dim},
                     {"norm", norm_spec_to_json(norm)}};
    if (topology == Topology::Mlp) {
        j["layer_widths"] = layer_widths;
    } else {
        j["n_blocks"] = n_blocks;
        j["d_model"] = d_model;
        j["n_heads"] = n_heads;
        j["context"] = context;
    }
    return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json &j) {
    ModelSpec s;
    s.topology = parse_topology(j.at("topology").get<std::string>());
    s.task = parse_task(j.at("task").get<std::string>());
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.output_dim = j.at("output_dim").get<std::size_t>();
    s.norm = norm_spec_from_json(j.at("norm"));
    s.layer_widths = j.value("layer_widths", s.layer_widths);
    s.n_blocks = j.value("n_blocks", s.n_blocks);
    s.d_model = j.value("d_model", s.d_model);
    s.n_heads = j.value("n_heads", s.n_heads);
    s.context = j.value("context", s.context);
    s.validate();
    return s;
}

ModelSpec ModelSpec::for_dataset(const Dataset &data, NormSpec norm) {
    ModelSpec s;
    s.norm = std::move(norm);
    s.task = data.task();
    s.input_dim = data.input_dim();
    s.output_dim = data.output_dim();
    if (data.task() == TaskKind::CharLM) {
        s.topology = Topology::TinyTransformer;
        s.context = data.spec().context;
    }
    return s;
}

std::vector<NamedTensor> Model::parameters() const {
    std::vector<NamedTensor> out = backbone_;
    for (std::size_t i = 0; i < norms_.size(); ++i)
        for (auto &[name, t] : norms_[i].parameters())
            out.push_back({"norm" + std::to_string(i) + "." + name, t});
    return out;
}

std::vector<NamedTensor> Model::buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < norms_.size(); ++i)
        for (auto &[name, t] : norms_[i].buffers())
            out.push_back({"norm" + std::to_string(i) + "." + name, t});
    return out;
}

bool Model::is_norm_parameter(const std::string &name) { return name.rfind("norm", 0) == 0; }

void Model::set_mode(NormMode mode) {
    for (auto &n : norms_)
        n.set_mode(mode);
}

Tensor Model::add_parameter(std::string name, Tensor value) {
    value.set_requires_grad(true);
    backbone_.push_back({std::move(name), value});
    return value;
}

void Model::add_norm(std::size_t dim, std::uint64_t seed) {
    // Each site draws NormalNorm noise from its own stream.
    norms_.emplace_back(spec_.norm, dim, stream_rng(seed, Stream::Noise, norms_.size())());
}

namespace {

Tensor gaussian_init(Shape shape, double sd, std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (auto &x : v)
        x = n(rng);
    return Tensor(std::move(shape), std::move(v));
}

Tensor linear(const Tensor &x, const Tensor &w, const Tensor &b) {
    Tensor y = matmul(x, w);
    return add(y, broadcast_to(b, y.shape()));
}

// Tensors are handles, so these alias the registered parameters.
struct Linear {
    Tensor w;
    Tensor b;
    Tensor operator()(const Tensor &x) const { return linear(x, w, b); }
};

class Mlp final : public Model {
  public:
    Mlp(const ModelSpec &spec, std::uint64_t seed) : Model(spec) {
        auto rng = stream_rng(seed, Stream::Init);
        std::size_t in = spec.input_dim;
        for (std::size_t i = 0; i < spec.layer_widths.size(); ++i) {
            const auto out = spec.layer_widths[i];
            layers_.push_back(make_linear("fc" + std::to_string(i), in, out, rng));
            in = out;
        }
        head_ = make_linear("out", in, spec.output_dim, rng);
        for (std::size_t i = 0; i < spec.layer_widths.size(); ++i)
            add_norm(spec.layer_widths[i], seed);
    }

    Tensor forward(const Batch &batch, std::vector<Tensor> *reps) override {
        if (!batch.features.defined() || batch.features.dim() != 2 || batch.features.shape()[1] != spec_.input_dim)
            throw ConfigError("mlp expects classification features of width " + std::to_string(spec_.input_dim));
        Tensor h = batch.features;
        if (reps)
            reps->push_back(h);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = norms_[i].forward(layers_[i](h));
            if (reps)
                reps->push_back(h);
            h = relu(h);
        }
        return head_(h);
    }

    info::Batch label_embeddings(const Batch &batch) const override {
        info::Batch y = info::Batch::Zero(static_cast<Eigen::Index>(batch.targets.size()),
                                          static_cast<Eigen::Index>(spec_.output_dim));
        for (std::size_t i = 0; i < batch.targets.size(); ++i)
            y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(batch.targets[i])) = 1.0;
        return y;
    }

  private:
    Linear make_linear(const std::string &name, std::size_t in, std::size_t out, std::mt19937_64 &rng) {
        Tensor w = add_parameter(name + ".w", gaussian_init({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        return {w, add_parameter(name + ".b", Tensor::zeros({out}))};
    }

    std::vector<Linear> layers_;
    Linear head_;
};

// Pre-norm blocks: x + attn(norm(x)), then x + mlp(norm(x)), then a final norm.
class TinyTransformer final : public Model {
  public:
    TinyTransformer(const ModelSpec &spec, std::uint64_t seed) : Model(spec) {
        auto rng = stream_rng(seed, Stream::Init);
        const std::size_t d = spec.d_model;
        tok_ = add_parameter("tok_emb", gaussian_init({spec.input_dim, d}, 0.02, rng));
        pos_ = add_parameter("pos_emb", gaussian_init({spec.context, d}, 0.02, rng));
        for (std::size_t b = 0; b < spec.n_blocks; ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            Block blk;
            blk.q = make_linear(p + "attn.q", d, d, rng);
            blk.k = make_linear(p + "attn.k", d, d, rng);
            blk.v = make_linear(p + "attn.v", d, d, rng);
            blk.o = make_linear(p + "attn.o", d, d, rng);
            blk.up = make_linear(p + "mlp.up", d, 4 * d, rng);
            blk.down = make_linear(p + "mlp.down", 4 * d, d, rng);
            blocks_.push_back(blk);
        }
        head_ = make_linear("head", d, spec.output_dim, rng);
        for (std::size_t i = 0; i < 2 * spec.n_blocks + 1; ++i)
            add_norm(d, seed);
    }

    Tensor forward(const Batch &batch, std::vector<Tensor> *reps) override {
        const std::size_t B = batch.rows, T = batch.steps, d = spec_.d_model;
        const std::size_t H = spec_.n_heads, dh = d / H;
        if (batch.tokens.size() != B * T || T > spec_.context || T == 0)
            throw ConfigError("transformer expects token windows of at most " + std::to_string(spec_.context));
        for (auto id : batch.tokens)
            if (id >= spec_.input_dim)
                throw ConfigError("token id outside the vocabulary");

        std::vector<std::size_t> positions(B * T);
        for (std::size_t i = 0; i < positions.size(); ++i)
            positions[i] = i % T;
        Tensor x = add(gather_rows(tok_, batch.tokens), gather_rows(pos_, positions));
        if (reps)
            reps->push_back(x);

        const Tensor &causal = causal_mask(B * H, T);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        auto heads = [&](const Tensor &t) { return reshape(permute(reshape(t, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh}); };

        std::size_t site = 0;
        for (const auto &blk : blocks_) {
            Tensor h = norms_[site++].forward(x);
            if (reps)
                reps->push_back(h);
            Tensor scores = add(scale(matmul(heads(blk.q(h)), transpose(heads(blk.k(h)))), inv_sqrt), causal);
            Tensor att = matmul(softmax_axis(scores, -1), heads(blk.v(h)));
            Tensor merged = reshape(permute(reshape(att, {B, H, T, dh}), {0, 2, 1, 3}), {B * T, d});
            x = add(x, blk.o(merged));

            h = norms_[site++].forward(x);
            if (reps)
                reps->push_back(h);
            x = add(x, blk.down(relu(blk.up(h))));
        }
        Tensor h = norms_[site].forward(x);
        if (reps)
            reps->push_back(h);
        return head_(h);
    }

    info::Batch label_embeddings(const Batch &batch) const override {
        const auto d = static_cast<Eigen::Index>(spec_.d_model);
        info::Batch y(static_cast<Eigen::Index>(batch.targets.size()), d);
        for (std::size_t i = 0; i < batch.targets.size(); ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                y(static_cast<Eigen::Index>(i), j) = tok_[batch.targets[i] * spec_.d_model + static_cast<std::size_t>(j)];
        return y;
    }

  private:
    struct Block {
        Linear q, k, v, o, up, down;
    };

    // Additive -1e9 above the diagonal, shared by every head and batch row.
    const Tensor &causal_mask(std::size_t count, std::size_t T) {
        if (!mask_.defined() || mask_.shape() != Shape{count, T, T}) {
            std::vector<double> m(count * T * T, 0.0);
            for (std::size_t c = 0; c < count; ++c)
                for (std::size_t i = 0; i < T; ++i)
                    for (std::size_t j = i + 1; j < T; ++j)
                        m[(c * T + i) * T + j] = -1e9;
            mask_ = Tensor({count, T, T}, std::move(m));
        }
        return mask_;
    }


    Linear make_linear(const std::string &name, std::size_t in, std::size_t out, std::mt19937_64 &rng) {
        Tensor w = add_parameter(name + ".w", gaussian_init({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        return {w, add_parameter(name + ".b", Tensor::zeros({out}))};
    }

    Tensor tok_;
    Tensor pos_;
    Tensor mask_;
    std::vector<Block> blocks_;
    Linear head_;
};

} // namespace

std::unique_ptr<Model> Model::create(const ModelSpec &spec, std::uint64_t seed) {
    spec.validate();
    if (spec.topology == Topology::Mlp)
        return std::make_unique<Mlp>(spec, seed);
    return std::make_unique<TinyTransformer>(spec, seed);
}

} // namespace ibn
