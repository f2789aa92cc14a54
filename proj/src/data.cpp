#include "ibnorm/data.hpp"

#include "ibnorm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace ibn {

std::string_view to_string(TaskKind task) {
    return task == TaskKind::CharLM ? "char_lm" : "synthetic_classification";
}

TaskKind parse_task(std::string_view name) {
    if (name == "synthetic_classification")
        return TaskKind::SyntheticClassification;
    if (name == "char_lm")
        return TaskKind::CharLM;
    throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::mt19937_64 stream_rng(std::uint64_t seed, Stream stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

std::uint64_t fnv1a(const void *data, std::size_t size, std::uint64_t state) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < size; ++i) {
        state ^= p[i];
        state *= 1099511628211ull;
    }
    return state;
}

std::uint64_t hash_batch(const Batch &batch, std::uint64_t state) {
    state = fnv1a(&batch.rows, sizeof batch.rows, state);
    state = fnv1a(&batch.steps, sizeof batch.steps, state);
    if (batch.features.defined())
        state = fnv1a(batch.features.data().data(), batch.features.numel() * sizeof(double), state);
    state = fnv1a(batch.tokens.data(), batch.tokens.size() * sizeof(std::size_t), state);
    return fnv1a(batch.targets.data(), batch.targets.size() * sizeof(std::size_t), state);
}

void DataSpec::validate() const {
    if (task == TaskKind::SyntheticClassification) {
        if (classes < 2)
            throw ConfigError("need at least 2 classes");
        if (dims < classes)
            throw ConfigError("dims must be at least the class count");
        if (train_size < 2 || eval_size < 1)
            throw ConfigError("split sizes too small");
        if (!(separation >= 0.0))
            throw ConfigError("separation must be non-negative");
    } else {
        if (text_path.empty())
            throw ConfigError("char_lm needs a text path");
        if (context < 2)
            throw ConfigError("context must be at least 2");
        if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
            throw ConfigError("eval_fraction must lie in (0, 1)");
    }
}

nlohmann::json DataSpec::to_json() const {
    nlohmann::json j{{"task", to_string(task)}};
    if (task == TaskKind::SyntheticClassification) {
        j["classes"] = classes;
        j["dims"] = dims;
        j["train_size"] = train_size;
        j["eval_size"] = eval_size;
        j["separation"] = separation;
    } else {
        j["text_path"] = text_path;
        j["context"] = context;
        j["eval_fraction"] = eval_fraction;
    }
    return j;
}

DataSpec DataSpec::from_json(const nlohmann::json &j) {
    DataSpec s;
    s.task = parse_task(j.value("task", std::string("synthetic_classification")));
    s.classes = j.value("classes", s.classes);
    s.dims = j.value("dims", s.dims);
    s.train_size = j.value("train_size", s.train_size);
    s.eval_size = j.value("eval_size", s.eval_size);
    s.separation = j.value("separation", s.separation);
    s.text_path = j.value("text_path", s.text_path);
    s.context = j.value("context", s.context);
    s.eval_fraction = j.value("eval_fraction", s.eval_fraction);
    return s;
}

std::vector<char32_t> decode_utf8(std::string_view bytes) {
    std::vector<char32_t> out;
    out.reserve(bytes.size());
    for (std::size_t i = 0; i < bytes.size();) {
        const auto b0 = static_cast<unsigned char>(bytes[i]);
        std::size_t len = b0 < 0x80 ? 1 : (b0 >> 5) == 0x6 ? 2 : (b0 >> 4) == 0xE ? 3 : (b0 >> 3) == 0x1E ? 4 : 0;
        if (len == 0 || i + len > bytes.size())
            throw IoError("invalid UTF-8 at byte " + std::to_string(i));
        char32_t cp = len == 1 ? b0 : b0 & (0x7F >> len);
        for (std::size_t k = 1; k < len; ++k) {
            const auto b = static_cast<unsigned char>(bytes[i + k]);
            if ((b & 0xC0) != 0x80)
                throw IoError("invalid UTF-8 at byte " + std::to_string(i + k));
            cp = (cp << 6) | (b & 0x3F);
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

namespace {

void make_classification(const DataSpec &spec, std::mt19937_64 &rng, std::vector<double> &x,
                         std::vector<std::size_t> &y, std::size_t n) {
    // Class c has mean (separation / sqrt 2) e_c, so every pair of means is
    // `separation` apart.
    std::normal_distribution<double> noise(0.0, 1.0);
    const double offset = spec.separation / std::sqrt(2.0);
    x.resize(n * spec.dims);
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = i % spec.classes;
        for (std::size_t j = 0; j < spec.dims; ++j)
            x[i * spec.dims + j] = noise(rng) + (j == y[i] ? offset : 0.0);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> xs(x.size());
    std::vector<std::size_t> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        ys[i] = y[perm[i]];
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(perm[i] * spec.dims), spec.dims,
                    xs.begin() + static_cast<std::ptrdiff_t>(i * spec.dims));
    }
    x = std::move(xs);
    y = std::move(ys);
}

std::string read_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad())
        throw IoError("error while reading '" + path + "'");
    return ss.str();
}

} // namespace

Dataset make_dataset(const DataSpec &spec, std::uint64_t seed) {
    spec.validate();
    Dataset d;
    d.spec_ = spec;
    auto rng = stream_rng(seed, Stream::Split);
    if (spec.task == TaskKind::SyntheticClassification) {
        make_classification(spec, rng, d.x_[0], d.y_[0], spec.train_size);
        make_classification(spec, rng, d.x_[1], d.y_[1], spec.eval_size);
        return d;
    }

    const auto text = decode_utf8(read_file(spec.text_path));
    const std::size_t window = spec.context + 1;
    if (text.size() < 2 * window)
        throw IoError("'" + spec.text_path + "' is too short for context " + std::to_string(spec.context));

    std::map<char32_t, std::size_t> index;
    for (char32_t c : text)
        index.emplace(c, 0);
    for (auto &[c, id] : index) {
        id = d.vocab_.size();
        d.vocab_.push_back(c);
    }
    d.ids_.reserve(text.size());
    for (char32_t c : text)
        d.ids_.push_back(index[c]);

    // Disjoint windows, so no character is shared between the splits.
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + window <= d.ids_.size(); s += window)
        starts.push_back(s);
    std::shuffle(starts.begin(), starts.end(), rng);
    const auto n_eval = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(spec.eval_fraction * static_cast<double>(starts.size()))));
    d.windows_[1].assign(starts.begin(), starts.begin() + static_cast<std::ptrdiff_t>(n_eval));
    d.windows_[0].assign(starts.begin() + static_cast<std::ptrdiff_t>(n_eval), starts.end());
    return d;
}

std::size_t Dataset::input_dim() const {
    return spec_.task == TaskKind::CharLM ? vocab_.size() : spec_.dims;
}

std::size_t Dataset::output_dim() const {
    return spec_.task == TaskKind::CharLM ? vocab_.size() : spec_.classes;
}

std::size_t Dataset::size(Split split) const {
    const int s = split == Split::Train ? 0 : 1;
    return spec_.task == TaskKind::CharLM ? windows_[s].size() : y_[s].size();
}

Batch Dataset::gather(Split split, std::span<const std::size_t> indices) const {
    const int s = split == Split::Train ? 0 : 1;
    Batch b;
    b.rows = indices.size();
    if (spec_.task == TaskKind::SyntheticClassification) {
        std::vector<double> feats;
        feats.reserve(indices.size() * spec_.dims);
        for (std::size_t i : indices) {
            const auto *row = x_[s].data() + i * spec_.dims;
            feats.insert(feats.end(), row, row + spec_.dims);
            b.targets.push_back(y_[s][i]);
        }
        b.features = Tensor({b.rows, spec_.dims}, std::move(feats));
        return b;
    }
    b.steps = spec_.context;
    b.tokens.reserve(b.rows * b.steps);
    b.targets.reserve(b.rows * b.steps);
    for (std::size_t i : indices) {
        const std::size_t start = windows_[s][i];
        for (std::size_t t = 0; t < b.steps; ++t) {
            b.tokens.push_back(ids_[start + t]);
            b.targets.push_back(ids_[start + t + 1]);
        }
    }
    return b;
}

Batch Dataset::sample(std::mt19937_64 &rng, std::size_t batch_size) const {
    std::uniform_int_distribution<std::size_t> pick(0, size(Split::Train) - 1);
    std::vector<std::size_t> idx(batch_size);
    for (auto &i : idx)
        i = pick(rng);
    return gather(Split::Train, idx);
}

Batch Dataset::head(Split split, std::size_t rows) const {
    const std::size_t n = rows == 0 ? size(split) : std::min(rows, size(split));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return gather(split, idx);
}

} // namespace ibn
