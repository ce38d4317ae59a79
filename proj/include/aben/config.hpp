#pragma once

// Run configuration document. Every level rejects unknown keys; defaults
// reproduce the published training setup.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "aben/errors.hpp"
#include "aben/model.hpp"
#include "aben/training.hpp"

namespace aben {

struct RunConfig {
    std::string data_dir = "data/prepared";
    std::string vocab;      // empty: <data_dir>/vocab.txt
    std::string embeddings; // empty: random table of model.embed_dim columns
    std::string run_dir = "runs/aben";
    ModelConfig model;
    TrainConfig training;
    std::vector<std::uint64_t> seeds = {0};
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, _] : j.items())
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& dst, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

} // namespace detail

inline void validate(const RunConfig& c) {
    const ModelConfig& m = c.model;
    if (m.channels < 1 || m.hidden < 1 || m.layers < 1 || m.context < 1 || m.embed_dim < 1)
        throw ConfigError("model: dimensions must be positive");
    if (m.max_len < 1) throw ConfigError("model.max_len must be >= 1");
    for (int s : m.backbone_strides)
        if (s < 1) throw ConfigError("model.backbone_strides must be positive");
    if (backbone_output_side(m.backbone()) != kFeatureGrid)
        throw ConfigError("model: image_side and backbone_strides must produce a " + std::to_string(kFeatureGrid) + "x" +
                          std::to_string(kFeatureGrid) + " feature map");
    validate(c.training);
    if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"data_dir", "vocab", "embeddings", "run_dir", "model", "training", "seeds"}, "config");
    RunConfig c;
    detail::read_key(j, "data_dir", c.data_dir, "config");
    detail::read_key(j, "vocab", c.vocab, "config");
    detail::read_key(j, "embeddings", c.embeddings, "config");
    detail::read_key(j, "run_dir", c.run_dir, "config");
    detail::read_key(j, "seeds", c.seeds, "config");
    if (j.contains("model")) {
        const auto& m = j["model"];
        detail::reject_unknown(m,
                               {"channels", "hidden", "layers", "context", "embed_dim", "max_len", "image_side",
                                "backbone_strides", "train_backbone", "finetune_embeddings"},
                               "model");
        detail::read_key(m, "channels", c.model.channels, "model");
        detail::read_key(m, "hidden", c.model.hidden, "model");
        detail::read_key(m, "layers", c.model.layers, "model");
        detail::read_key(m, "context", c.model.context, "model");
        detail::read_key(m, "embed_dim", c.model.embed_dim, "model");
        detail::read_key(m, "max_len", c.model.max_len, "model");
        detail::read_key(m, "image_side", c.model.image_side, "model");
        detail::read_key(m, "backbone_strides", c.model.backbone_strides, "model");
        detail::read_key(m, "train_backbone", c.model.train_backbone, "model");
        detail::read_key(m, "finetune_embeddings", c.model.finetune_embeddings, "model");
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        detail::reject_unknown(t,
                               {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "mode", "clip_gradients",
                                "clip_norm", "validate", "generation_max_len"},
                               "training");
        detail::read_key(t, "lr", c.training.adam.lr, "training");
        detail::read_key(t, "beta1", c.training.adam.beta1, "training");
        detail::read_key(t, "beta2", c.training.adam.beta2, "training");
        detail::read_key(t, "eps", c.training.adam.eps, "training");
        detail::read_key(t, "batch_size", c.training.batch_size, "training");
        detail::read_key(t, "epochs", c.training.epochs, "training");
        std::string mode = to_string(c.training.mode);
        detail::read_key(t, "mode", mode, "training");
        c.training.mode = parse_sampling_mode(mode);
        detail::read_key(t, "clip_gradients", c.training.clip_gradients, "training");
        detail::read_key(t, "clip_norm", c.training.clip_norm, "training");
        detail::read_key(t, "validate", c.training.validate, "training");
        detail::read_key(t, "generation_max_len", c.training.generation_max_len, "training");
    }
    validate(c);
    return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["data_dir"] = c.data_dir;
    j["vocab"] = c.vocab;
    j["embeddings"] = c.embeddings;
    j["run_dir"] = c.run_dir;
    nlohmann::ordered_json m;
    m["channels"] = c.model.channels;
    m["hidden"] = c.model.hidden;
    m["layers"] = c.model.layers;
    m["context"] = c.model.context;
    m["embed_dim"] = c.model.embed_dim;
    m["max_len"] = c.model.max_len;
    m["image_side"] = c.model.image_side;
    m["backbone_strides"] = c.model.backbone_strides;
    m["train_backbone"] = c.model.train_backbone;
    m["finetune_embeddings"] = c.model.finetune_embeddings;
    j["model"] = m;
    nlohmann::ordered_json t;
    t["lr"] = c.training.adam.lr;
    t["beta1"] = c.training.adam.beta1;
    t["beta2"] = c.training.adam.beta2;
    t["eps"] = c.training.adam.eps;
    t["batch_size"] = c.training.batch_size;
    t["epochs"] = c.training.epochs;
    t["mode"] = to_string(c.training.mode);
    t["clip_gradients"] = c.training.clip_gradients;
    t["clip_norm"] = c.training.clip_norm;
    t["validate"] = c.training.validate;
    t["generation_max_len"] = c.training.generation_max_len;
    j["training"] = t;
    j["seeds"] = c.seeds;
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace aben
