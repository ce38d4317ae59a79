#pragma once

// Checkpoint directories: manifest.json, weights.bin and a copy of the
// vocabulary. The weight blob is a flat list of named double tensors; batch
// normalisation running statistics are stored as "bn:<name>:<slot>:mean|var".

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "aben/dataset.hpp"
#include "aben/errors.hpp"
#include "aben/model.hpp"
#include "aben/tokenizer.hpp"

namespace aben {

namespace fs = std::filesystem;

inline constexpr char kWeightsMagic[8] = {'A', 'B', 'E', 'N', 'W', '0', '0', '1'};

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
    T v;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("weights: truncated while reading " + what);
    return v;
}

} // namespace detail

inline void write_tensors(const fs::path& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kWeightsMagic, sizeof kWeightsMagic);
    detail::write_pod<std::uint64_t>(out, tensors.size());
    for (const auto& t : tensors) {
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_pod<std::int32_t>(out, d);
        detail::write_pod<std::uint64_t>(out, t.values.size());
        out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<NamedTensor> read_tensors(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[sizeof kWeightsMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kWeightsMagic, sizeof magic) != 0)
        throw IoError(path.string() + ": not a weights file");
    const auto count = detail::read_pod<std::uint64_t>(in, "tensor count");
    std::vector<NamedTensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto len = detail::read_pod<std::uint32_t>(in, "name length");
        t.name.resize(len);
        if (!in.read(t.name.data(), len)) throw IoError("weights: truncated name");
        const auto rank = detail::read_pod<std::uint32_t>(in, t.name);
        for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(detail::read_pod<std::int32_t>(in, t.name));
        const auto n = detail::read_pod<std::uint64_t>(in, t.name);
        if (n > (std::uint64_t{1} << 34)) throw IoError("weights: implausible tensor size for " + t.name);
        t.values.resize(n);
        if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double))))
            throw IoError("weights: truncated data for " + t.name);
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<NamedTensor> collect_tensors(const nn::ParameterStore& store) {
    std::vector<NamedTensor> out;
    for (const auto& e : store.entries()) out.push_back({e.name, e.var->shape, e.var->value});
    for (const auto& [name, slots] : store.bn_buffers())
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const int ch = static_cast<int>(slots[s].mean.size());
            out.push_back({"bn:" + name + ":" + std::to_string(s) + ":mean", {ch}, slots[s].mean});
            out.push_back({"bn:" + name + ":" + std::to_string(s) + ":var", {ch}, slots[s].var});
        }
    return out;
}

// Every parameter and statistics slot of `store` must be present with the
// same shape; extra tensors are an error as well.
inline void restore_tensors(nn::ParameterStore& store, const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;
    std::size_t used = 0;
    auto take = [&](const std::string& name, const std::vector<int>& shape, std::vector<double>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + name);
        if (it->second->shape != shape || it->second->values.size() != dst.size())
            throw IoError("checkpoint tensor " + name + " has shape " + ag::shape_str(it->second->shape) + ", expected " +
                          ag::shape_str(shape));
        dst = it->second->values;
        ++used;
    };
    for (const auto& e : store.entries()) take(e.name, e.var->shape, e.var->value);
    for (auto& [name, slots] : store.bn_buffers())
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const std::vector<int> shape{static_cast<int>(slots[s].mean.size())};
            take("bn:" + name + ":" + std::to_string(s) + ":mean", shape, slots[s].mean);
            take("bn:" + name + ":" + std::to_string(s) + ":var", shape, slots[s].var);
        }
    if (used != by_name.size()) throw IoError("checkpoint contains tensors the model does not define");
}

inline std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

struct CheckpointMeta {
    int epoch = 0;
    StandardizationStats standardization;
    nlohmann::json metric_trace = nlohmann::json::array();
    nlohmann::json extra = nlohmann::json::object();
};

inline void save_checkpoint(const fs::path& dir, const AbenModel& model, const SubwordVocabulary& vocab,
                            const CheckpointMeta& meta) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    if (vocab.size() != model.config().vocab_size) throw ContractError("save_checkpoint: vocabulary does not match model");
    write_tensors(dir / "weights.bin", collect_tensors(model.store()));
    save_vocabulary(dir / "vocab.txt", vocab);
    nlohmann::ordered_json m;
    m["format"] = 1;
    m["epoch"] = meta.epoch;
    m["config"] = to_json(model.config());
    m["vocab_hash"] = hash_hex(vocab.hash());
    m["standardization"] = stats_to_json(meta.standardization);
    m["metric_trace"] = meta.metric_trace;
    for (const auto& [k, v] : meta.extra.items()) m[k] = v;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << m.dump(2) << '\n';
}

struct LoadedCheckpoint {
    fs::path dir;
    CheckpointMeta meta;
    SubwordVocabulary vocab;
    std::unique_ptr<AbenModel> model;
};

inline nlohmann::json read_manifest(const fs::path& dir) {
    const fs::path p = dir / "manifest.json";
    std::ifstream in(p);
    if (!in) throw IoError("checkpoint manifest not found: " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + p.string() + ": " + e.what());
    }
}

inline LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
    const nlohmann::json m = read_manifest(dir);
    LoadedCheckpoint ck;
    ck.dir = dir;
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(m.at("config"));
        ck.meta.epoch = m.at("epoch").get<int>();
        ck.meta.standardization = stats_from_json(m.at("standardization"));
        ck.meta.metric_trace = m.value("metric_trace", nlohmann::json::array());
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + (dir / "manifest.json").string() + ": " + e.what());
    }
    ck.vocab = load_vocabulary(dir / "vocab.txt");
    if (hash_hex(ck.vocab.hash()) != m.at("vocab_hash").get<std::string>())
        throw IoError("checkpoint vocabulary hash does not match its manifest");
    EmbeddingTable placeholder{cfg.vocab_size, cfg.embed_dim,
                               std::vector<double>(static_cast<std::size_t>(cfg.vocab_size) * cfg.embed_dim, 0.0)};
    ck.model = std::make_unique<AbenModel>(cfg, placeholder, 0);
    restore_tensors(ck.model->store(), read_tensors(dir / "weights.bin"));
    return ck;
}

} // namespace aben
