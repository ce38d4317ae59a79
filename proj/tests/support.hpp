#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aben/aben.hpp"

namespace testing {

using namespace aben;

// Backbone geometry that reaches 7x7 from a 14x14 input.
inline ModelConfig toy_config(int vocab, int channels = 4, int hidden = 8, int context = 3, int layers = 2,
                              int embed = 6) {
    ModelConfig c;
    c.channels = channels;
    c.hidden = hidden;
    c.context = context;
    c.layers = layers;
    c.embed_dim = embed;
    c.vocab_size = vocab;
    c.max_len = 8;
    c.image_side = 14;
    c.backbone_strides = {1, 1, 1, 2};
    return c;
}

inline std::unique_ptr<AbenModel> toy_model(const ModelConfig& c, std::uint64_t seed) {
    return std::make_unique<AbenModel>(c, random_embedding_table(c.vocab_size, c.embed_dim, seed + 101), seed);
}

inline EncodedScene random_encoded(int channels, Rng& rng) {
    EncodedScene s;
    for (int i = 0; i < channels; ++i) s.target.push_back(rng.uniform(0, 1));
    for (int i = 0; i < channels; ++i) s.source.push_back(rng.uniform(0, 1));
    for (int i = 0; i < channels * kFeatureGrid * kFeatureGrid; ++i) s.visual_maps.push_back(rng.uniform(0, 1));
    for (auto& v : s.relation.values) v = rng.normal();
    return s;
}

inline Image random_image(int w, int h, Rng& rng) {
    Image img(w, h);
    for (double& v : img.rgb) v = rng.uniform();
    return img;
}

inline SceneInputs random_inputs(int side, Rng& rng) {
    SceneInputs in{random_image(side, side, rng), random_image(side, side, rng), random_image(side, side, rng), {}};
    for (auto& v : in.relation.values) v = rng.normal();
    return in;
}

// [BOS] t_1..t_len [EOS] with content ids drawn from 4..vocab-1.
inline std::vector<int> random_sequence(int len, int vocab, Rng& rng) {
    std::vector<int> s{SubwordVocabulary::kBos};
    for (int i = 0; i < len; ++i) s.push_back(4 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 4))));
    s.push_back(SubwordVocabulary::kEos);
    return s;
}

// Synthetic scenes with a vocabulary, standardizer and toy model config.
struct ToyCorpus {
    std::vector<SyntheticScene> scenes;
    SubwordVocabulary vocab;
    StandardizationStats stats;
    ModelConfig config;

    SceneSet scene_set(std::size_t first = 0, std::size_t count = SIZE_MAX) const {
        SceneSet set;
        for (std::size_t i = first; i < scenes.size() && i - first < count; ++i) {
            set.inputs.push_back(prepare_scene(scenes[i].sample, scenes[i].image, stats, config.image_side));
            set.references.push_back(scenes[i].sample.references);
        }
        return set;
    }
};

inline ToyCorpus toy_corpus(int n, std::uint64_t seed, int references = 1) {
    ToyCorpus c;
    c.scenes = make_synthetic_scenes(n, seed, {48, 36, references});
    std::vector<std::string> sentences;
    std::vector<RelationalFeatures> feats;
    for (const auto& s : c.scenes) {
        for (const auto& r : s.sample.references) sentences.push_back(r);
        feats.push_back(compute_relational_features(s.sample));
    }
    c.vocab = build_vocabulary(sentences, 60);
    c.stats = fit_standardizer(feats);
    c.config = toy_config(c.vocab.size());
    c.config.max_len = 14;
    return c;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("aben_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t checked = 0;
};

// The floor keeps exactly-zero gradients (e.g. a bias feeding batch norm)
// from turning finite-difference round-off into a large relative error.
inline double relative_error(double a, double n, double floor = 1e-4) {
    return std::abs(a - n) / std::max(std::abs(a) + std::abs(n), floor);
}

// Central differences against the tape gradient of `loss`, for up to
// `per_tensor` randomly chosen entries of every parameter.
inline GradCheckResult grad_check(const std::vector<std::pair<std::string, ag::Var>>& params,
                                  const std::function<ag::Var()>& loss, Rng& rng, std::size_t per_tensor = 25,
                                  double h = 1e-5) {
    {
        ag::Tape tape;
        ag::Var l = loss();
        for (const auto& [_, p] : params) p->grad.assign(p->size(), 0.0);
        tape.backward(l);
    }
    GradCheckResult res;
    for (const auto& [name, p] : params) {
        std::vector<std::size_t> idx(p->size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        rng.shuffle(idx);
        if (idx.size() > per_tensor) idx.resize(per_tensor);
        for (std::size_t i : idx) {
            const double saved = p->value[i];
            double plus, minus;
            {
                ag::NoGrad ng;
                p->value[i] = saved + h;
                plus = loss()->value[0];
                p->value[i] = saved - h;
                minus = loss()->value[0];
            }
            p->value[i] = saved;
            const double numeric = (plus - minus) / (2 * h);
            const double err = relative_error(p->grad[i], numeric);
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(p->grad[i]) + " numeric " +
                            std::to_string(numeric);
            }
        }
    }
    return res;
}

inline std::vector<std::pair<std::string, ag::Var>> trainable_named(const nn::ParameterStore& store) {
    std::vector<std::pair<std::string, ag::Var>> out;
    for (const auto& e : store.entries())
        if (e.trainable && e.var->requires_grad) out.emplace_back(e.name, e.var);
    return out;
}

} // namespace testing
