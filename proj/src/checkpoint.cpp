#include "ibnorm/checkpoint.hpp"

#include "ibnorm/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ibn {

namespace {

constexpr char kMagic[] = "IBNCKPT1";
constexpr std::size_t kMagicLen = 8;

template <typename T> void put_le(std::string &out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes, bytes + sizeof(T));
    out.append(reinterpret_cast<const char *>(bytes), sizeof(T));
}

template <typename T> T get_le(const char *p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

std::string engine_state(const std::mt19937_64 &rng) {
    std::ostringstream ss;
    ss << rng;
    return ss.str();
}

} // namespace

std::string Checkpoint::config_digest() const {
    const auto text = config.dump();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text.data(), text.size())));
    return buf;
}

const CheckpointArray *Checkpoint::find(std::string_view name) const {
    for (const auto &a : arrays)
        if (a.name == name)
            return &a;
    return nullptr;
}

std::string Checkpoint::serialize() const {
    nlohmann::json header{{"config", config}, {"config_digest", config_digest()}, {"step", step}, {"rng", rng}};
    auto &list = header["arrays"] = nlohmann::json::array();
    for (const auto &a : arrays) {
        if (shape_numel(a.shape) != a.values.size())
            throw ContractError("checkpoint array '" + a.name + "' does not match its shape");
        list.push_back({{"name", a.name}, {"shape", a.shape}});
    }
    const auto text = header.dump();
    std::string out(kMagic, kMagicLen);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    for (const auto &a : arrays)
        for (double v : a.values)
            put_le<double>(out, v);
    return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
    if (bytes.size() < kMagicLen + 8 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen))
        throw IoError("not an ibnorm checkpoint");
    const auto header_len = get_le<std::uint64_t>(bytes.data() + kMagicLen);
    std::size_t pos = kMagicLen + 8;
    if (header_len > bytes.size() - pos)
        throw IoError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, header_len));
    } catch (const nlohmann::json::exception &e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    pos += header_len;

    Checkpoint c;
    try {
        c.config = header.at("config");
        c.step = header.at("step").get<std::uint64_t>();
        c.rng = header.at("rng");
        for (const auto &entry : header.at("arrays")) {
            CheckpointArray a;
            a.name = entry.at("name").get<std::string>();
            a.shape = entry.at("shape").get<Shape>();
            const auto n = shape_numel(a.shape);
            if (n > (bytes.size() - pos) / sizeof(double))
                throw IoError("truncated checkpoint data for '" + a.name + "'");
            a.values.resize(n);
            for (std::size_t i = 0; i < n; ++i, pos += sizeof(double))
                a.values[i] = get_le<double>(bytes.data() + pos);
            c.arrays.push_back(std::move(a));
        }
        if (header.at("config_digest").get<std::string>() != c.config_digest())
            throw IoError("checkpoint config digest mismatch");
    } catch (const nlohmann::json::exception &e) {
        throw IoError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (pos != bytes.size())
        throw IoError("trailing bytes after checkpoint data");
    return c;
}

void write_file_atomic(const std::filesystem::path &path, std::string_view contents) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write '" + tmp.string() + "'");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out.flush())
            throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

void Checkpoint::save(const std::filesystem::path &path) const { write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read checkpoint '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

Checkpoint capture(const Model &model, const Optimizer *optimizer, nlohmann::json config, std::uint64_t step) {
    Checkpoint c;
    c.config = std::move(config);
    c.step = step;
    for (const auto &[name, t] : model.parameters())
        c.arrays.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    for (const auto &[name, t] : model.buffers())
        c.arrays.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    if (optimizer) {
        c.rng["optimizer_steps"] = optimizer->steps_taken();
        for (auto &[name, values] : optimizer->state())
            c.arrays.push_back({name, Shape{values.size()}, values});
    }
    auto &norms = const_cast<Model &>(model).norms();
    for (std::size_t i = 0; i < norms.size(); ++i)
        c.rng["norm" + std::to_string(i)] = engine_state(norms[i].rng());
    return c;
}

void load_into(Model &model, const Checkpoint &ckpt) {
    auto copy = [&](const NamedTensor &nt) {
        const auto *a = ckpt.find(nt.name);
        if (!a)
            throw IoError("checkpoint lacks '" + nt.name + "'");
        if (a->shape != nt.tensor.shape())
            throw IoError("checkpoint shape " + shape_str(a->shape) + " for '" + nt.name + "' does not match " +
                          shape_str(nt.tensor.shape()));
        auto dst = Tensor(nt.tensor).mutable_data();
        std::copy(a->values.begin(), a->values.end(), dst.begin());
    };
    for (const auto &nt : model.parameters())
        copy(nt);
    for (const auto &nt : model.buffers())
        copy(nt);
    auto &norms = model.norms();
    for (std::size_t i = 0; i < norms.size(); ++i) {
        const auto key = "norm" + std::to_string(i);
        if (ckpt.rng.contains(key)) {
            std::istringstream ss(ckpt.rng.at(key).get<std::string>());
            ss >> norms[i].rng();
        }
    }
}

std::unique_ptr<Model> restore_model(const Checkpoint &ckpt) {
    if (!ckpt.config.contains("model"))
        throw ConfigError("checkpoint config has no model section");
    auto model = Model::create(ModelSpec::from_json(ckpt.config.at("model")), 0);
    load_into(*model, ckpt);
    return model;
}

} // namespace ibn
