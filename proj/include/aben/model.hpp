#pragma once

// The attention branch encoder-decoder: backbone, LSTM decoder, visual and
// linguistic attention branches and the generation branch, wired per step.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "aben/autograd.hpp"
#include "aben/dataset.hpp"
#include "aben/decoder.hpp"
#include "aben/encoder.hpp"
#include "aben/genbranch.hpp"
#include "aben/image.hpp"
#include "aben/lab.hpp"
#include "aben/nn.hpp"
#include "aben/tokenizer.hpp"
#include "aben/vab.hpp"

namespace aben {

struct ModelConfig {
    int channels = 512;
    int hidden = 768;
    int layers = 3;
    int context = 10;
    int embed_dim = 768;
    int vocab_size = 0;
    int max_len = 30;
    int image_side = 224;
    std::array<int, 4> backbone_strides = {4, 2, 2, 2};
    bool train_backbone = false;
    bool finetune_embeddings = false;

    BackboneConfig backbone() const { return {image_side, channels, backbone_strides}; }
    // One running-statistics slot per step, plus one for the EOS step.
    int max_steps() const { return max_len + 1; }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"channels", c.channels},
            {"hidden", c.hidden},
            {"layers", c.layers},
            {"context", c.context},
            {"embed_dim", c.embed_dim},
            {"vocab_size", c.vocab_size},
            {"max_len", c.max_len},
            {"image_side", c.image_side},
            {"backbone_strides", c.backbone_strides},
            {"train_backbone", c.train_backbone},
            {"finetune_embeddings", c.finetune_embeddings}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.channels = j.at("channels").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.context = j.at("context").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.image_side = j.at("image_side").get<int>();
    c.backbone_strides = j.at("backbone_strides").get<std::array<int, 4>>();
    c.train_backbone = j.at("train_backbone").get<bool>();
    c.finetune_embeddings = j.at("finetune_embeddings").get<bool>();
    return c;
}

// Resized crops and standardized geometry for one scene.
struct SceneInputs {
    Image target;
    Image source;
    Image full;
    RelationalFeatures relation; // standardized
};

inline SceneInputs prepare_scene(const SceneSample& scene, const Image& image, const StandardizationStats& stats,
                                 int side) {
    if (image.width != scene.width || image.height != scene.height)
        throw ValidationError("image " + scene.image_path.string() + " is " + std::to_string(image.width) + "x" +
                              std::to_string(image.height) + ", record says " + std::to_string(scene.width) + "x" +
                              std::to_string(scene.height));
    return {crop_and_resize(image, scene.target, side), crop_and_resize(image, scene.source, side),
            resize_full(image, side), apply_standardizer(compute_relational_features(scene), stats)};
}

inline SceneInputs prepare_scene(const SceneSample& scene, const StandardizationStats& stats, int side) {
    return prepare_scene(scene, load_image(scene.image_path), stats, side);
}

// Backbone outputs for a scene, computed once when the backbone is frozen.
struct EncodedScene {
    std::vector<double> target;      // C
    std::vector<double> source;      // C
    std::vector<double> visual_maps; // C x 7 x 7
    RelationalFeatures relation;
};

struct SceneFeatures {
    ag::Var encoding;    // [B, 2C+15]
    ag::Var visual_maps; // [B, C, 7, 7]
};

struct StepOutput {
    VisualAttentionOutput visual;
    LinguisticAttentionOutput linguistic;
    ag::Var hidden;     // h_k
    ag::Var gen_logits; // [B,V]
};

struct StepRecord {
    std::vector<std::vector<double>> p_v, p_l, p_g; // per sample
    std::vector<std::vector<double>> visual_map;    // per sample, h*w
    std::vector<std::vector<double>> linguistic_weights; // per sample, N
    std::vector<int> inputs;
    std::vector<int> labels;
};

struct ForwardOptions {
    bool training = true;
    double epsilon = 1.0; // probability of feeding the ground-truth token
    Rng* rng = nullptr;   // required when epsilon < 1
    bool keep_records = false;
};

struct ForwardResult {
    ag::Var loss_v;
    ag::Var loss_l;
    ag::Var loss_g;
    ag::Var total;
    int steps = 0;
    std::vector<StepRecord> records;
};

inline std::vector<std::vector<double>> softmax_rows(const ag::Var& logits) {
    const int batch = logits->dim(0), classes = logits->dim(1);
    std::vector<std::vector<double>> out;
    for (int b = 0; b < batch; ++b)
        out.push_back(ag::softmax_row({logits->value.data() + static_cast<std::size_t>(b) * classes,
                                       static_cast<std::size_t>(classes)}));
    return out;
}

inline std::vector<std::vector<double>> split_rows(const ag::Var& x) {
    const int batch = x->dim(0);
    const std::size_t width = x->size() / static_cast<std::size_t>(batch);
    std::vector<std::vector<double>> out;
    for (int b = 0; b < batch; ++b)
        out.emplace_back(x->value.begin() + static_cast<std::ptrdiff_t>(b * width),
                         x->value.begin() + static_cast<std::ptrdiff_t>((b + 1) * width));
    return out;
}

class AbenModel {
  public:
    AbenModel(const ModelConfig& cfg, const EmbeddingTable& embeddings, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.vocab_size <= 4) throw ConfigError("model: vocabulary must contain tokens beyond the specials");
        if (embeddings.rows != cfg.vocab_size || embeddings.dim != cfg.embed_dim)
            throw ConfigError("model: embedding table is " + std::to_string(embeddings.rows) + "x" +
                              std::to_string(embeddings.dim) + ", config expects " + std::to_string(cfg.vocab_size) +
                              "x" + std::to_string(cfg.embed_dim));
        if (cfg.max_len < 1) throw ConfigError("model: max_len must be >= 1");
        Rng rng(seed);
        backbone_ = Backbone(store_, cfg.backbone(), rng);
        if (!cfg.train_backbone)
            for (const auto& layer : backbone_.layers()) {
                layer.weight->requires_grad = false;
                layer.bias->requires_grad = false;
            }
        decoder_ = Decoder(store_,
                           {cfg.layers, cfg.hidden, cfg.embed_dim, cfg.channels, scene_encoding_size(cfg.channels)},
                           rng);
        vab_ = VisualAttentionBranch(store_, {cfg.channels, cfg.hidden, cfg.vocab_size, cfg.max_steps()}, rng);
        lab_ = LinguisticAttentionBranch(store_, {cfg.hidden, cfg.context, cfg.vocab_size, cfg.max_steps()}, rng);
        gen_ = GenerationBranch(store_, {cfg.hidden, cfg.context, cfg.vocab_size}, rng);
        embedding_ = store_.add("embedding.table", {embeddings.rows, embeddings.dim}, embeddings.values,
                                cfg.finetune_embeddings);
    }

    AbenModel(const AbenModel&) = delete;
    AbenModel& operator=(const AbenModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    nn::ParameterStore& store() { return store_; }
    const nn::ParameterStore& store() const { return store_; }
    const Backbone& backbone() const { return backbone_; }
    const Decoder& decoder() const { return decoder_; }
    const VisualAttentionBranch& vab() const { return vab_; }
    const LinguisticAttentionBranch& lab() const { return lab_; }
    const GenerationBranch& generation() const { return gen_; }
    ag::Var embedding_table() const { return embedding_; }

    // Parameters the optimiser updates.
    std::vector<ag::Var> trainable_parameters() const {
        std::vector<ag::Var> out;
        for (const auto& e : store_.entries())
            if (e.trainable && e.var->requires_grad) out.push_back(e.var);
        return out;
    }

    EncodedScene precompute(const SceneInputs& in) const {
        ag::NoGrad guard;
        auto maps = backbone_.features(image_batch({&in.target, &in.source, &in.full}, cfg_.image_side));
        const std::size_t per = maps->size() / 3;
        VisualFeatureMaps t{cfg_.channels, {maps->value.begin(), maps->value.begin() + static_cast<std::ptrdiff_t>(per)}};
        VisualFeatureMaps s{cfg_.channels, {maps->value.begin() + static_cast<std::ptrdiff_t>(per),
                                            maps->value.begin() + static_cast<std::ptrdiff_t>(2 * per)}};
        return {pool_feature_maps(t), pool_feature_maps(s),
                {maps->value.begin() + static_cast<std::ptrdiff_t>(2 * per), maps->value.end()}, in.relation};
    }

    SceneFeatures encode(const std::vector<const EncodedScene*>& scenes) const {
        std::vector<double> enc, maps;
        for (const auto* s : scenes) {
            auto x = assemble_scene_encoding(s->target, s->source, s->relation);
            enc.insert(enc.end(), x.begin(), x.end());
            maps.insert(maps.end(), s->visual_maps.begin(), s->visual_maps.end());
        }
        const int b = static_cast<int>(scenes.size());
        return {ag::constant({b, scene_encoding_size(cfg_.channels)}, std::move(enc)),
                ag::constant({b, cfg_.channels, kFeatureGrid, kFeatureGrid}, std::move(maps))};
    }

    // Differentiable path through the backbone.
    SceneFeatures encode(const std::vector<const SceneInputs*>& scenes) const {
        std::vector<const Image*> targets, sources, fulls;
        std::vector<double> rel;
        for (const auto* s : scenes) {
            targets.push_back(&s->target);
            sources.push_back(&s->source);
            fulls.push_back(&s->full);
            rel.insert(rel.end(), s->relation.values.begin(), s->relation.values.end());
        }
        const int b = static_cast<int>(scenes.size());
        ag::Var t = ag::global_avg_pool(backbone_.features(image_batch(targets, cfg_.image_side)));
        ag::Var s = ag::global_avg_pool(backbone_.features(image_batch(sources, cfg_.image_side)));
        ag::Var v = backbone_.features(image_batch(fulls, cfg_.image_side));
        return {ag::concat1({t, s, ag::constant({b, kRelationalDims}, std::move(rel))}), v};
    }

    // One decoding step. `state` holds h_1..h_{k-1}; `step` is the zero-based
    // step index selecting the normalisation statistics slot.
    StepOutput step(DecoderState& state, const ag::Var& pooled, const ag::Var& h_prev,
                    const std::vector<int>& prev_tokens, bool training, int step) const {
        StepOutput out;
        out.visual = vab_.forward(pooled, h_prev, training, step);
        ag::Var context = build_context(state.history, state.encoder_projection, cfg_.context);
        out.hidden = decoder_.step(state, ag::embedding(embedding_, prev_tokens), out.visual.attended);
        out.linguistic = lab_.forward(context, training, step);
        out.gen_logits = gen_.forward(out.hidden, out.linguistic.rows);
        return out;
    }

    // Runs every step of framed token sequences ([BOS] ... [EOS]) and returns
    // the three branch losses: summed over steps, averaged over the batch.
    ForwardResult forward(const SceneFeatures& features, const std::vector<std::vector<int>>& tokens,
                          const ForwardOptions& opt) const {
        const int batch = features.encoding->dim(0);
        if (static_cast<int>(tokens.size()) != batch) throw ContractError("forward: token batch size mismatch");
        std::size_t longest = 0;
        for (const auto& t : tokens) {
            if (t.size() < 2 || t.front() != SubwordVocabulary::kBos)
                throw ContractError("forward: sequences must be framed with [BOS] ... [EOS]");
            longest = std::max(longest, t.size());
        }
        if (opt.epsilon < 1.0 && opt.rng == nullptr) throw ContractError("forward: scheduled sampling needs an rng");
        const int steps = static_cast<int>(longest) - 1;
        const double weight = 1.0 / batch;

        ag::Var pooled = pool_visual_features(features.visual_maps);
        DecoderState state = decoder_.init(features.encoding);
        ag::Var h_prev = ag::zeros({batch, cfg_.hidden});
        std::vector<int> inputs(static_cast<std::size_t>(batch), SubwordVocabulary::kBos);
        std::vector<ag::Var> lv, ll, lg;
        ForwardResult res;
        res.steps = steps;
        for (int k = 1; k <= steps; ++k) {
            std::vector<int> labels(static_cast<std::size_t>(batch), -1);
            for (int b = 0; b < batch; ++b)
                if (static_cast<std::size_t>(k) < tokens[b].size()) labels[b] = tokens[b][k];
            StepOutput so = step(state, pooled, h_prev, inputs, opt.training, k - 1);
            lv.push_back(ag::softmax_cross_entropy(so.visual.logits, labels, weight));
            ll.push_back(ag::softmax_cross_entropy(so.linguistic.logits, labels, weight));
            lg.push_back(ag::softmax_cross_entropy(so.gen_logits, labels, weight));
            if (opt.keep_records) {
                StepRecord r;
                r.p_v = softmax_rows(so.visual.logits);
                r.p_l = softmax_rows(so.linguistic.logits);
                r.p_g = softmax_rows(so.gen_logits);
                r.visual_map = split_rows(so.visual.attention);
                r.linguistic_weights = split_rows(so.linguistic.weights);
                r.inputs = inputs;
                r.labels = labels;
                res.records.push_back(std::move(r));
            }
            const int vocab = so.gen_logits->dim(1);
            for (int b = 0; b < batch; ++b) {
                if (labels[b] < 0) {
                    inputs[b] = SubwordVocabulary::kPad;
                    continue;
                }
                bool teacher = opt.epsilon >= 1.0 || opt.rng->bernoulli(opt.epsilon);
                inputs[b] = teacher ? labels[b]
                                    : argmax({so.gen_logits->value.data() + static_cast<std::size_t>(b) * vocab,
                                              static_cast<std::size_t>(vocab)});
            }
            h_prev = so.hidden;
        }
        res.loss_v = ag::sum_scalars(lv);
        res.loss_l = ag::sum_scalars(ll);
        res.loss_g = ag::sum_scalars(lg);
        res.total = ag::sum_scalars({res.loss_v, res.loss_l, res.loss_g});
        return res;
    }

  private:
    ModelConfig cfg_;
    nn::ParameterStore store_;
    Backbone backbone_;
    Decoder decoder_;
    VisualAttentionBranch vab_;
    LinguisticAttentionBranch lab_;
    GenerationBranch gen_;
    ag::Var embedding_;
};

} // namespace aben
