#pragma once

// Multi-layer LSTM decoder. A learned projection of the scene encoding seeds
// layer 0's hidden and cell state; every step consumes [prev embedding | v_k].

#include <cmath>
#include <string>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/nn.hpp"

namespace aben {

struct DecoderConfig {
    int layers = 3;
    int hidden = 768;
    int embed_dim = 768;
    int visual_dim = 512;
    int encoding_dim = 2 * 512 + 15;

    int input_dim() const { return embed_dim + visual_dim; }
};

struct DecoderState {
    std::vector<ag::Var> hidden; // per layer, [B,d]
    std::vector<ag::Var> cell;
    ag::Var encoder_projection;  // [B,d]
    std::vector<ag::Var> history; // h_1..h_k
    int step = 0;
};

class Decoder {
  public:
    Decoder() = default;
    Decoder(nn::ParameterStore& store, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.layers < 1) throw ConfigError("decoder: layers must be >= 1");
        if (cfg.hidden <= 0) throw ConfigError("decoder: hidden dimension must be > 0");
        projection_ = nn::Linear(store, "decoder.projection", cfg.encoding_dim, cfg.hidden, rng);
        for (int l = 0; l < cfg.layers; ++l) {
            const int in = (l == 0 ? cfg.input_dim() : cfg.hidden) + cfg.hidden;
            gates_.emplace_back(store, "decoder.lstm" + std::to_string(l), in, 4 * cfg.hidden, rng);
            // forget gate bias starts at 1
            for (int j = cfg.hidden; j < 2 * cfg.hidden; ++j) gates_.back().bias->value[j] = 1.0;
        }
    }

    const DecoderConfig& config() const { return cfg_; }
    const nn::Linear& projection() const { return projection_; }
    const nn::Linear& gates(int layer) const { return gates_.at(static_cast<std::size_t>(layer)); }

    DecoderState init(const ag::Var& encoding) const {
        if (encoding->shape.size() != 2 || encoding->dim(1) != cfg_.encoding_dim)
            throw ShapeError("decoder init: expected [B," + std::to_string(cfg_.encoding_dim) + "], got " +
                             ag::shape_str(encoding->shape));
        for (double v : encoding->value)
            if (!std::isfinite(v)) throw NumericError("decoder init: non-finite scene encoding");
        DecoderState st;
        st.encoder_projection = projection_(encoding);
        const int batch = encoding->dim(0);
        for (int l = 0; l < cfg_.layers; ++l) {
            st.hidden.push_back(l == 0 ? st.encoder_projection : ag::zeros({batch, cfg_.hidden}));
            st.cell.push_back(l == 0 ? st.encoder_projection : ag::zeros({batch, cfg_.hidden}));
        }
        return st;
    }

    // One step through every layer; returns the top-layer output h_k.
    ag::Var step(DecoderState& st, const ag::Var& prev_embedding, const ag::Var& visual) const {
        if (prev_embedding->shape.size() != 2 || prev_embedding->dim(1) != cfg_.embed_dim)
            throw ShapeError("decoder step: embedding " + ag::shape_str(prev_embedding->shape) + ", expected width " +
                             std::to_string(cfg_.embed_dim));
        if (visual->shape.size() != 2 || visual->dim(1) != cfg_.visual_dim)
            throw ShapeError("decoder step: visual feature " + ag::shape_str(visual->shape) + ", expected width " +
                             std::to_string(cfg_.visual_dim));
        ag::Var x = ag::concat1({prev_embedding, visual});
        const int d = cfg_.hidden;
        for (int l = 0; l < cfg_.layers; ++l) {
            ag::Var z = gates_[static_cast<std::size_t>(l)](ag::concat1({x, st.hidden[l]}));
            ag::Var i = ag::sigmoid(ag::slice_cols(z, 0, d));
            ag::Var f = ag::sigmoid(ag::slice_cols(z, d, d));
            ag::Var g = ag::tanh(ag::slice_cols(z, 2 * d, d));
            ag::Var o = ag::sigmoid(ag::slice_cols(z, 3 * d, d));
            ag::Var c = ag::add(ag::mul(f, st.cell[l]), ag::mul(i, g));
            ag::Var h = ag::mul(o, ag::tanh(c));
            st.cell[l] = c;
            st.hidden[l] = h;
            x = h;
        }
        st.history.push_back(x);
        ++st.step;
        return x;
    }

  private:
    DecoderConfig cfg_;
    nn::Linear projection_;
    std::vector<nn::Linear> gates_;
};

} // namespace aben
