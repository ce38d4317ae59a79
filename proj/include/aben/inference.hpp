#pragma once

// Greedy decoding and attention export.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "aben/autograd.hpp"
#include "aben/errors.hpp"
#include "aben/genbranch.hpp"
#include "aben/image.hpp"
#include "aben/model.hpp"
#include "aben/tokenizer.hpp"

namespace aben {

inline constexpr int kEncoderSlot = -1;

struct GenerationStep {
    int token = 0;
    int map_height = 0;
    int map_width = 0;
    std::vector<double> visual_map;         // row-major map_height x map_width
    std::vector<double> linguistic_weights; // a_k, one per slot
    std::vector<int> slot_tokens;           // token generated at the slot's step, or kEncoderSlot
    std::vector<double> p_v, p_l, p_g;
};

struct GenerationResult {
    std::vector<int> ids; // generated tokens, EOS included when produced
    std::string sentence;
    bool truncated = false;
    std::vector<GenerationStep> steps;
};

// Greedy decoding of a batch of scenes in eval mode. Each row stops at its
// first EOS or after `max_len` tokens. Rows are independent, so the batch size
// does not change any row's tokens.
inline std::vector<GenerationResult> generate_batch(const AbenModel& model, const SceneFeatures& features,
                                                    const SubwordVocabulary& vocab, int max_len,
                                                    bool keep_artifacts = true) {
    if (max_len < 1) throw ConfigError("generate: max_len must be >= 1");
    ag::NoGrad no_grad;
    const ModelConfig& cfg = model.config();
    const int batch = features.encoding->dim(0);
    const int n = cfg.context;

    ag::Var pooled = pool_visual_features(features.visual_maps);
    DecoderState state = model.decoder().init(features.encoding);
    ag::Var h_prev = ag::zeros({batch, cfg.hidden});
    std::vector<int> inputs(static_cast<std::size_t>(batch), SubwordVocabulary::kBos);
    std::vector<GenerationResult> out(static_cast<std::size_t>(batch));
    std::vector<bool> done(static_cast<std::size_t>(batch), false);

    for (int k = 1; k <= max_len; ++k) {
        StepOutput so = model.step(state, pooled, h_prev, inputs, false, k - 1);
        const int vocab_size = so.gen_logits->dim(1);
        std::vector<std::vector<double>> pv, pl, pg;
        if (keep_artifacts) {
            pv = softmax_rows(so.visual.logits);
            pl = softmax_rows(so.linguistic.logits);
            pg = softmax_rows(so.gen_logits);
        }
        const int mh = so.visual.attention->dim(2), mw = so.visual.attention->dim(3);
        for (int b = 0; b < batch; ++b) {
            auto& res = out[static_cast<std::size_t>(b)];
            if (done[static_cast<std::size_t>(b)]) {
                inputs[static_cast<std::size_t>(b)] = SubwordVocabulary::kPad;
                continue;
            }
            const int token = argmax({so.gen_logits->value.data() + static_cast<std::size_t>(b) * vocab_size,
                                      static_cast<std::size_t>(vocab_size)});
            if (keep_artifacts) {
                GenerationStep st;
                st.token = token;
                st.map_height = mh;
                st.map_width = mw;
                const std::size_t plane = static_cast<std::size_t>(mh) * mw;
                st.visual_map.assign(so.visual.attention->value.begin() + static_cast<std::ptrdiff_t>(b * plane),
                                     so.visual.attention->value.begin() + static_cast<std::ptrdiff_t>((b + 1) * plane));
                st.linguistic_weights.assign(
                    so.linguistic.weights->value.begin() + static_cast<std::ptrdiff_t>(b * n),
                    so.linguistic.weights->value.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
                // Slot j holds h_{k-n+j}; step t generated ids[t-1].
                for (int j = 0; j < n; ++j) {
                    const int t = k - n + j;
                    st.slot_tokens.push_back(t < 1 ? kEncoderSlot : res.ids[static_cast<std::size_t>(t - 1)]);
                }
                st.p_v = std::move(pv[static_cast<std::size_t>(b)]);
                st.p_l = std::move(pl[static_cast<std::size_t>(b)]);
                st.p_g = std::move(pg[static_cast<std::size_t>(b)]);
                res.steps.push_back(std::move(st));
            }
            res.ids.push_back(token);
            inputs[static_cast<std::size_t>(b)] = token;
            if (token == SubwordVocabulary::kEos) done[static_cast<std::size_t>(b)] = true;
        }
        h_prev = so.hidden;
        if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    }
    for (auto& r : out) {
        r.truncated = r.ids.empty() || r.ids.back() != SubwordVocabulary::kEos;
        r.sentence = detokenize(r.ids, vocab);
    }
    return out;
}

inline GenerationResult generate(const AbenModel& model, const EncodedScene& scene, const SubwordVocabulary& vocab,
                                 int max_len) {
    return generate_batch(model, model.encode(std::vector<const EncodedScene*>{&scene}), vocab, max_len).front();
}

inline GenerationResult generate_sentence(const AbenModel& model, const SceneSample& scene,
                                          const StandardizationStats& stats, const SubwordVocabulary& vocab,
                                          int max_len) {
    const SceneInputs inputs = prepare_scene(scene, stats, model.config().image_side);
    return generate(model, model.precompute(inputs), vocab, max_len);
}

// Sentences for many scenes, decoded in chunks of `batch_size`.
inline std::vector<std::string> generate_corpus(const AbenModel& model, const std::vector<EncodedScene>& scenes,
                                                const SubwordVocabulary& vocab, int max_len, int batch_size = 32) {
    std::vector<std::string> out;
    out.reserve(scenes.size());
    for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<const EncodedScene*> chunk;
        for (std::size_t i = start; i < std::min(scenes.size(), start + static_cast<std::size_t>(batch_size)); ++i)
            chunk.push_back(&scenes[i]);
        for (auto& r : generate_batch(model, model.encode(chunk), vocab, max_len, false))
            out.push_back(std::move(r.sentence));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export

enum class Upsampling { Nearest, Bilinear };

// The pooled map cell i covers backbone-grid rows [2i, min(2i+2, G)), which
// in turn span the resized full image uniformly.
inline double cell_centre(int i, int grid) { return (2.0 * i + std::min(2 * i + 2, grid)) / 2.0 / grid; }

inline std::vector<double> upsample_map(const std::vector<double>& map, int mh, int mw, int width, int height,
                                        Upsampling mode, int grid = kFeatureGrid) {
    if (map.size() != static_cast<std::size_t>(mh) * mw) throw ShapeError("upsample_map: map size mismatch");
    if ((grid + 1) / 2 != mh || (grid + 1) / 2 != mw) throw ShapeError("upsample_map: map is not a pooled grid");
    std::vector<double> out(static_cast<std::size_t>(width) * height);
    auto locate = [&](double u, int cells, int& lo, int& hi, double& f) {
        if (u <= cell_centre(0, grid)) {
            lo = hi = 0;
            f = 0.0;
            return;
        }
        for (int i = 0; i + 1 < cells; ++i) {
            const double a = cell_centre(i, grid), b = cell_centre(i + 1, grid);
            if (u < b) {
                lo = i;
                hi = i + 1;
                f = (u - a) / (b - a);
                return;
            }
        }
        lo = hi = cells - 1;
        f = 0.0;
    };
    for (int y = 0; y < height; ++y) {
        const double v = (y + 0.5) / height;
        for (int x = 0; x < width; ++x) {
            const double u = (x + 0.5) / width;
            double value;
            if (mode == Upsampling::Nearest) {
                const int gy = std::min(static_cast<int>(v * grid), grid - 1) / 2;
                const int gx = std::min(static_cast<int>(u * grid), grid - 1) / 2;
                value = map[static_cast<std::size_t>(gy) * mw + gx];
            } else {
                int y0, y1, x0, x1;
                double fy, fx;
                locate(v, mh, y0, y1, fy);
                locate(u, mw, x0, x1, fx);
                auto at = [&](int r, int c) { return map[static_cast<std::size_t>(r) * mw + c]; };
                value = (at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) + (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy;
            }
            out[static_cast<std::size_t>(y) * width + x] = value;
        }
    }
    return out;
}

inline constexpr double kOverlayStrength = 0.7;

// Blends towards pure blue in proportion to the attention value.
inline Image overlay_attention(const Image& image, const std::vector<double>& upsampled) {
    Image out = image;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const double a = kOverlayStrength * upsampled[static_cast<std::size_t>(y) * image.width + x];
            const double blue[3] = {0.0, 0.0, 1.0};
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = (1.0 - a) * image.at(x, y, c) + a * blue[c];
        }
    return out;
}

inline std::string shortest_repr(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q.push_back('"');
        q.push_back(c);
    }
    return q + "\"";
}

inline nlohmann::json result_to_json(const GenerationResult& r, const SubwordVocabulary& vocab) {
    // status 1 flags a truncated (EOS-less) sentence.
    return {{"ids", r.ids},
            {"pieces", pieces(r.ids, vocab, false)},
            {"sentence", r.sentence},
            {"truncated", r.truncated},
            {"status", r.truncated ? 1 : 0}};
}

// Writes step_<k>.png overlays, linguistic_attention.csv and result.json.
inline void export_attention(const GenerationResult& result, const Image& image, const std::filesystem::path& out_dir,
                             const SubwordVocabulary& vocab, Upsampling mode = Upsampling::Bilinear) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw IoError("cannot create output directory: " + out_dir.string());
    for (std::size_t k = 0; k < result.steps.size(); ++k) {
        const auto& st = result.steps[k];
        auto up = upsample_map(st.visual_map, st.map_height, st.map_width, image.width, image.height, mode);
        save_png(out_dir / ("step_" + std::to_string(k + 1) + ".png"), overlay_attention(image, up));
    }
    const auto csv_path = out_dir / "linguistic_attention.csv";
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    csv << "step,predicted,slot,slot_subword,weight\n";
    for (std::size_t k = 0; k < result.steps.size(); ++k) {
        const auto& st = result.steps[k];
        for (std::size_t j = 0; j < st.linguistic_weights.size(); ++j) {
            const int slot_token = st.slot_tokens[j];
            csv << (k + 1) << ',' << csv_field(vocab.token(st.token)) << ',' << (j + 1) << ','
                << csv_field(slot_token == kEncoderSlot ? std::string("<enc>") : vocab.token(slot_token)) << ','
                << shortest_repr(st.linguistic_weights[j]) << '\n';
        }
    }
    if (!csv) throw IoError("write failed: " + csv_path.string());
    const auto json_path = out_dir / "result.json";
    std::ofstream js(json_path);
    if (!js) throw IoError("cannot write " + json_path.string());
    js << result_to_json(result, vocab).dump(2) << '\n';
}

} // namespace aben
