#pragma once

// Generation branch: [h_k | flattened l_k] -> FC(d) -> ReLU -> FC(d) -> V logits.

#include <span>
#include <string>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/nn.hpp"
#include "aben/vab.hpp"

namespace aben {

struct GenerationConfig {
    int hidden = 768;
    int context = 10;
    int vocab = 0;

    int fused_dim() const { return hidden + context * hidden; }
};

class GenerationBranch {
  public:
    GenerationBranch() = default;
    GenerationBranch(nn::ParameterStore& store, const GenerationConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.vocab <= 0) throw ConfigError("generation branch: vocabulary size must be positive");
        fc1_ = nn::Linear(store, "gen.fc1", cfg.fused_dim(), cfg.hidden, rng);
        fc2_ = nn::Linear(store, "gen.fc2", cfg.hidden, cfg.hidden, rng);
        head_ = nn::Linear(store, "gen.head", cfg.hidden, cfg.vocab, rng);
    }

    const GenerationConfig& config() const { return cfg_; }
    const nn::Linear& fc1() const { return fc1_; }
    const nn::Linear& fc2() const { return fc2_; }
    const nn::Linear& head() const { return head_; }

    // h [B,d], rows [B,N*d] -> logits [B,V]
    ag::Var forward(const ag::Var& h, const ag::Var& rows) const {
        if (h->shape.size() != 2 || h->dim(1) != cfg_.hidden)
            throw ShapeError("generation branch: h_k " + ag::shape_str(h->shape));
        if (rows->shape != ag::Shape{h->dim(0), cfg_.context * cfg_.hidden})
            throw ShapeError("generation branch: l_k " + ag::shape_str(rows->shape));
        ag::Var x = ag::concat1({h, rows});
        x = ag::relu(fc1_(x));
        return head_(fc2_(x));
    }

  private:
    GenerationConfig cfg_;
    nn::Linear fc1_;
    nn::Linear fc2_;
    nn::Linear head_;
};

// Highest probability, lowest index on ties.
inline int argmax(std::span<const double> p) {
    int best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

inline double gen_loss(const std::vector<std::vector<double>>& step_probs, const std::vector<int>& labels) {
    return vab_loss(step_probs, labels);
}

} // namespace aben
