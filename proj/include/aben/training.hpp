#pragma once

// Joint optimisation of the three branch losses with Adam, teacher forcing or
// scheduled sampling, per-epoch checkpoints and METEOR-based model selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "aben/autograd.hpp"
#include "aben/checkpoint.hpp"
#include "aben/dataset.hpp"
#include "aben/errors.hpp"
#include "aben/inference.hpp"
#include "aben/metrics.hpp"
#include "aben/model.hpp"
#include "aben/random.hpp"
#include "aben/tokenizer.hpp"
#include "aben/vab.hpp"

namespace aben {

// ---------------------------------------------------------------------------
// Losses

struct LossBreakdown {
    double L_v = 0.0;
    double L_l = 0.0;
    double L_g = 0.0;
    double L_total = 0.0;
};

inline LossBreakdown make_breakdown(double lv, double ll, double lg) { return {lv, ll, lg, lv + ll + lg}; }

using StepDistributions = std::vector<std::vector<double>>; // per step, a distribution over V

// Cross-entropy of each branch over one sequence; `labels` are the targets
// y_1..y_K (the framed sequence without its leading BOS).
inline LossBreakdown compute_losses(const StepDistributions& p_v, const StepDistributions& p_l,
                                    const StepDistributions& p_g, const std::vector<int>& labels) {
    if (p_v.size() != labels.size() || p_l.size() != labels.size() || p_g.size() != labels.size())
        throw ContractError("compute_losses: " + std::to_string(labels.size()) + " labels but " +
                            std::to_string(p_v.size()) + "/" + std::to_string(p_l.size()) + "/" +
                            std::to_string(p_g.size()) + " branch steps");
    return make_breakdown(vab_loss(p_v, labels), lab_loss(p_l, labels), gen_loss(p_g, labels));
}

// Summed over samples.
inline LossBreakdown compute_losses(const std::vector<StepDistributions>& p_v, const std::vector<StepDistributions>& p_l,
                                    const std::vector<StepDistributions>& p_g,
                                    const std::vector<std::vector<int>>& labels) {
    if (p_v.size() != labels.size() || p_l.size() != labels.size() || p_g.size() != labels.size())
        throw ContractError("compute_losses: sample counts differ");
    double lv = 0.0, ll = 0.0, lg = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const LossBreakdown b = compute_losses(p_v[n], p_l[n], p_g[n], labels[n]);
        lv += b.L_v;
        ll += b.L_l;
        lg += b.L_g;
    }
    return make_breakdown(lv, ll, lg);
}

// ---------------------------------------------------------------------------
// Scheduled sampling

enum class SamplingMode { TeacherForcing, ScheduledSampling };

inline SamplingMode parse_sampling_mode(const std::string& s) {
    if (s == "tf") return SamplingMode::TeacherForcing;
    if (s == "ss") return SamplingMode::ScheduledSampling;
    throw ConfigError("sampling mode must be 'tf' or 'ss', got '" + s + "'");
}

inline std::string to_string(SamplingMode m) { return m == SamplingMode::TeacherForcing ? "tf" : "ss"; }

inline double sampling_probability(int epoch, int max_epoch) {
    if (max_epoch <= 0) throw ConfigError("scheduled sampling: max_epoch must be positive");
    if (epoch < 0 || epoch > max_epoch)
        throw ContractError("scheduled sampling: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(max_epoch) + "]");
    return static_cast<double>(max_epoch - epoch) / static_cast<double>(max_epoch);
}

struct SamplingSchedule {
    SamplingMode mode = SamplingMode::TeacherForcing;
    int max_epoch = 100;

    // Epochs are numbered from 1.
    double epsilon(int epoch) const {
        return mode == SamplingMode::TeacherForcing ? 1.0 : sampling_probability(epoch, max_epoch);
    }
};

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.7;
    double beta2 = 0.99999;
    double eps = 1e-8;
};

class Adam {
  public:
    Adam(std::vector<ag::Var> params, const AdamConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        if (!(cfg.lr >= 0.0)) throw ConfigError("adam: learning rate must be non-negative");
        for (const auto& p : params_) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (p.grad.empty()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const double g = p.grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                p.value[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
    }

    int steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    std::vector<ag::Var> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

// Rescales all gradients so that their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<ag::Var>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p->grad) g *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Data

// Scenes ready for the network plus their reference sentences.
struct SceneSet {
    std::vector<SceneInputs> inputs;
    std::vector<std::vector<std::string>> references;

    std::size_t size() const { return inputs.size(); }
};

inline SceneSet load_scene_set(const std::vector<SceneSample>& scenes, const StandardizationStats& stats, int side) {
    SceneSet set;
    for (const auto& s : scenes) {
        set.inputs.push_back(prepare_scene(s, stats, side));
        set.references.push_back(s.references);
    }
    return set;
}

// [BOS] pieces [EOS], content clipped to max_len pieces.
inline std::vector<int> frame_tokens(const std::string& sentence, const SubwordVocabulary& vocab, int max_len) {
    std::vector<int> ids = tokenize(sentence, vocab, false);
    if (static_cast<int>(ids.size()) > max_len) ids.resize(static_cast<std::size_t>(max_len));
    ids.insert(ids.begin(), SubwordVocabulary::kBos);
    ids.push_back(SubwordVocabulary::kEos);
    return ids;
}

struct TrainingExample {
    std::size_t scene = 0;
    std::vector<int> tokens; // framed
};

struct PreparedScenes {
    SceneSet scenes;                    // kept only when the backbone trains
    std::vector<EncodedScene> encoded;  // frozen-backbone cache
    std::vector<std::vector<std::string>> references;
    std::vector<TrainingExample> examples; // one per (scene, reference)
};

inline PreparedScenes prepare_scenes(const AbenModel& model, SceneSet set, const SubwordVocabulary& vocab) {
    PreparedScenes p;
    p.references = set.references;
    for (std::size_t i = 0; i < set.size(); ++i)
        for (const auto& r : set.references[i]) p.examples.push_back({i, frame_tokens(r, vocab, model.config().max_len)});
    if (model.config().train_backbone) {
        p.scenes = std::move(set);
    } else {
        for (const auto& in : set.inputs) p.encoded.push_back(model.precompute(in));
    }
    return p;
}

inline SceneFeatures scene_features(const AbenModel& model, const PreparedScenes& data,
                                    const std::vector<std::size_t>& scene_ids) {
    if (model.config().train_backbone) {
        std::vector<const SceneInputs*> ptrs;
        for (auto i : scene_ids) ptrs.push_back(&data.scenes.inputs[i]);
        return model.encode(ptrs);
    }
    std::vector<const EncodedScene*> ptrs;
    for (auto i : scene_ids) ptrs.push_back(&data.encoded[i]);
    return model.encode(ptrs);
}

inline std::vector<std::string> generate_for(const AbenModel& model, const PreparedScenes& data,
                                             const SubwordVocabulary& vocab, int max_len, int batch_size = 32) {
    std::vector<std::string> out;
    const std::size_t n = data.references.size();
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> ids;
        for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(batch_size)); ++i) ids.push_back(i);
        SceneFeatures f;
        {
            ag::NoGrad guard;
            f = scene_features(model, data, ids);
        }
        for (auto& r : generate_batch(model, f, vocab, max_len, false)) out.push_back(std::move(r.sentence));
    }
    return out;
}

// Mean per-sentence loss under teacher forcing in eval mode.
inline LossBreakdown evaluate_loss(const AbenModel& model, const PreparedScenes& data, int batch_size = 32) {
    ag::NoGrad guard;
    double lv = 0.0, ll = 0.0, lg = 0.0;
    const std::size_t n = data.examples.size();
    if (n == 0) return {};
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> scenes;
        std::vector<std::vector<int>> tokens;
        for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(batch_size)); ++i) {
            scenes.push_back(data.examples[i].scene);
            tokens.push_back(data.examples[i].tokens);
        }
        ForwardOptions opt;
        opt.training = false;
        ForwardResult r = model.forward(scene_features(model, data, scenes), tokens, opt);
        const double w = static_cast<double>(tokens.size());
        lv += r.loss_v->value[0] * w;
        ll += r.loss_l->value[0] * w;
        lg += r.loss_g->value[0] * w;
    }
    const double dn = static_cast<double>(n);
    return make_breakdown(lv / dn, ll / dn, lg / dn);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    AdamConfig adam;
    int batch_size = 32;
    int epochs = 100;
    std::uint64_t seed = 0;
    SamplingMode mode = SamplingMode::TeacherForcing;
    bool clip_gradients = true;
    double clip_norm = 5.0;
    bool validate = true;
    int generation_max_len = 30;
};

inline void validate(const TrainConfig& c) {
    if (!(c.adam.lr > 0.0)) throw ConfigError("training: lr must be positive");
    if (c.batch_size < 1) throw ConfigError("training: batch size must be >= 1");
    if (c.epochs < 1) throw ConfigError("training: epochs must be >= 1");
    if (c.clip_gradients && !(c.clip_norm > 0.0)) throw ConfigError("training: clip norm must be positive");
    if (c.generation_max_len < 1) throw ConfigError("training: generation max_len must be >= 1");
}

struct EpochRecord {
    int epoch = 0;
    LossBreakdown train;
    std::optional<LossBreakdown> validation;
    std::optional<double> val_meteor;
    double epsilon = 1.0;
};

inline nlohmann::ordered_json log_json(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["L_v"] = r.train.L_v;
    j["L_l"] = r.train.L_l;
    j["L_g"] = r.train.L_g;
    j["L_total"] = r.train.L_total;
    j["val_meteor"] = r.val_meteor ? nlohmann::ordered_json(*r.val_meteor) : nlohmann::ordered_json(nullptr);
    j["epsilon"] = r.epsilon;
    return j;
}

inline nlohmann::json trace_json(const std::vector<EpochRecord>& trace) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : trace) {
        nlohmann::json j = log_json(r);
        if (r.validation) j["val_L_total"] = r.validation->L_total;
        arr.push_back(std::move(j));
    }
    return arr;
}

// Highest validation METEOR, earliest epoch on ties. Epochs without a
// validation score rank below any scored epoch; with none scored, the last.
inline int select_best_model(const std::vector<EpochRecord>& trace) {
    if (trace.empty()) throw ContractError("select_best_model: no checkpoints");
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        if (!trace[i].val_meteor) continue;
        if (!best || *trace[i].val_meteor > *trace[*best].val_meteor) best = i;
    }
    return best ? trace[*best].epoch : trace.back().epoch;
}

inline int select_best_model(const std::vector<double>& meteor_trace) {
    std::vector<EpochRecord> trace;
    for (std::size_t i = 0; i < meteor_trace.size(); ++i) {
        EpochRecord r;
        r.epoch = static_cast<int>(i) + 1;
        r.val_meteor = meteor_trace[i];
        trace.push_back(r);
    }
    return select_best_model(trace);
}

class NonFiniteLossError : public NumericError {
  public:
    NonFiniteLossError(int epoch, std::size_t batch, std::vector<std::size_t> examples, LossBreakdown loss)
        : NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch)),
          epoch_(epoch), batch_(batch), examples_(std::move(examples)), loss_(loss) {}

    int epoch() const { return epoch_; }
    std::size_t batch() const { return batch_; }
    const std::vector<std::size_t>& examples() const { return examples_; }

    nlohmann::json dump() const {
        auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v)); };
        return {{"epoch", epoch_},
                {"batch", batch_},
                {"examples", examples_},
                {"L_v", num(loss_.L_v)},
                {"L_l", num(loss_.L_l)},
                {"L_g", num(loss_.L_g)},
                {"L_total", num(loss_.L_total)}};
    }

  private:
    int epoch_;
    std::size_t batch_;
    std::vector<std::size_t> examples_;
    LossBreakdown loss_;
};

struct TrainOutputs {
    std::filesystem::path run_dir; // empty: nothing is written
    StandardizationStats standardization;
    nlohmann::json extra_manifest = nlohmann::json::object();
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochRecord> trace;
    int best_epoch = 0;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
};

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d", epoch);
    return run_dir / "checkpoints" / name;
}

inline TrainResult train(AbenModel& model, const PreparedScenes& train_data, const PreparedScenes* validation,
                         const SubwordVocabulary& vocab, const TrainConfig& cfg, const TrainOutputs& outputs = {}) {
    validate(cfg);
    if (train_data.examples.empty()) throw ContractError("train: empty training split");
    if (vocab.size() != model.config().vocab_size) throw ContractError("train: vocabulary does not match model");
    namespace fs = std::filesystem;

    const SamplingSchedule schedule{cfg.mode, cfg.epochs};
    const std::vector<ag::Var> params = model.trainable_parameters();
    Adam adam(params, cfg.adam);
    Rng rng(cfg.seed);
    const bool writing = !outputs.run_dir.empty();
    std::ofstream log;
    if (writing) {
        std::error_code ec;
        fs::create_directories(outputs.run_dir / "checkpoints", ec);
        if (ec) throw IoError("cannot create run directory " + outputs.run_dir.string() + ": " + ec.message());
        log.open(outputs.run_dir / "train_log.jsonl", std::ios::trunc);
        if (!log) throw IoError("cannot write training log in " + outputs.run_dir.string());
    }
    const ag::Var embedding = model.embedding_table();
    const bool embedding_trains = embedding->requires_grad;

    TrainResult result;
    std::vector<std::size_t> order(train_data.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const double n_examples = static_cast<double>(order.size());

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.epsilon = schedule.epsilon(epoch);
        rng.shuffle(order);
        double lv = 0.0, ll = 0.0, lg = 0.0;
        std::size_t batch_id = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_id) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> scenes, examples;
            std::vector<std::vector<int>> tokens;
            for (std::size_t i = start; i < end; ++i) {
                const auto& ex = train_data.examples[order[i]];
                examples.push_back(order[i]);
                scenes.push_back(ex.scene);
                tokens.push_back(ex.tokens);
            }
            ag::Tape tape;
            ForwardOptions opt;
            opt.training = true;
            opt.epsilon = rec.epsilon;
            opt.rng = &rng;
            ForwardResult fr = model.forward(scene_features(model, train_data, scenes), tokens, opt);
            const LossBreakdown b{fr.loss_v->value[0], fr.loss_l->value[0], fr.loss_g->value[0], fr.total->value[0]};
            if (!std::isfinite(b.L_total)) {
                NonFiniteLossError err(epoch, batch_id, examples, b);
                if (writing) {
                    std::ofstream dump(outputs.run_dir / "nonfinite_batch.json");
                    dump << err.dump().dump(2) << '\n';
                }
                throw err;
            }
            adam.zero_grad();
            tape.backward(fr.total);
            if (cfg.clip_gradients) clip_grad_norm(params, cfg.clip_norm);
            adam.step();
            if (embedding_trains) {
                const int dim = embedding->dim(1);
                std::fill_n(embedding->value.begin() + SubwordVocabulary::kPad * dim, dim, 0.0);
            }
            const double w = static_cast<double>(tokens.size());
            lv += b.L_v * w;
            ll += b.L_l * w;
            lg += b.L_g * w;
        }
        rec.train = make_breakdown(lv / n_examples, ll / n_examples, lg / n_examples);
        if (cfg.validate && validation != nullptr && !validation->references.empty()) {
            rec.validation = evaluate_loss(model, *validation, cfg.batch_size);
            const auto generated = generate_for(model, *validation, vocab, cfg.generation_max_len, cfg.batch_size);
            std::vector<metrics::Tokens> cands;
            std::vector<std::vector<metrics::Tokens>> refs;
            for (std::size_t i = 0; i < generated.size(); ++i) {
                cands.push_back(metrics::words(generated[i]));
                refs.emplace_back();
                for (const auto& r : validation->references[i]) refs.back().push_back(metrics::words(r));
            }
            rec.val_meteor = metrics::meteor_corpus(cands, refs);
        }
        result.trace.push_back(rec);
        result.best_epoch = select_best_model(result.trace);

        if (writing) {
            log << log_json(rec).dump() << '\n';
            log.flush();
            CheckpointMeta meta;
            meta.epoch = epoch;
            meta.standardization = outputs.standardization;
            meta.metric_trace = trace_json(result.trace);
            meta.extra = outputs.extra_manifest;
            save_checkpoint(checkpoint_dir(outputs.run_dir, epoch), model, vocab, meta);
            result.last_checkpoint = checkpoint_dir(outputs.run_dir, epoch);
            result.best_checkpoint = checkpoint_dir(outputs.run_dir, result.best_epoch);
            for (const auto& r : result.trace) {
                if (r.epoch == epoch || r.epoch == result.best_epoch) continue;
                std::error_code ec;
                fs::remove_all(checkpoint_dir(outputs.run_dir, r.epoch), ec);
            }
        }
        if (outputs.on_epoch) outputs.on_epoch(rec);
    }
    if (writing) {
        nlohmann::ordered_json summary;
        summary["best_epoch"] = result.best_epoch;
        summary["best_checkpoint"] = result.best_checkpoint.string();
        summary["last_checkpoint"] = result.last_checkpoint.string();
        std::ofstream out(outputs.run_dir / "selection.json");
        out << summary.dump(2) << '\n';
    }
    return result;
}

} // namespace aben
