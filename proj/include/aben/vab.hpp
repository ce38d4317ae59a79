#pragma once

// Visual attention branch. Per step it sees the 2x2-pooled scene map together
// with a broadcast projection of the previous decoder output, predicts the
// current subword through four convolutions + GAP, and derives a sigmoid
// attention mask from the third convolution. The attended feature is
// v_k = GAP((1 + A) * pooled map).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/nn.hpp"

namespace aben {

struct VabConfig {
    int channels = 512;
    int hidden = 768;
    int vocab = 0;
    int max_steps = 31;
};

struct VisualAttentionOutput {
    ag::Var logits;    // [B,V]
    ag::Var attention; // [B,1,h,w], values in (0,1)
    ag::Var attended;  // [B,C]
};

// [B,C,7,7] -> [B,C,4,4]
inline ag::Var pool_visual_features(const ag::Var& maps) { return ag::avg_pool2x2(maps); }

// v_k from a pooled map and an attention mask: GAP((1 + A) * features).
inline ag::Var attend_visual(const ag::Var& pooled, const ag::Var& attention) {
    return ag::global_avg_pool(ag::residual_mask(pooled, attention));
}

class VisualAttentionBranch {
  public:
    VisualAttentionBranch() = default;
    VisualAttentionBranch(nn::ParameterStore& store, const VabConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.vocab <= 0) throw ConfigError("vab: vocabulary size must be positive");
        const int c = cfg.channels;
        const ag::Conv2dGeometry same{1, 1, 1, 1};
        condition_ = nn::Linear(store, "vab.condition", cfg.hidden, c, rng);
        conv_[0] = nn::Conv2d(store, "vab.conv1", 2 * c, c, 3, 3, same, rng);
        conv_[1] = nn::Conv2d(store, "vab.conv2", c, c, 3, 3, same, rng);
        conv_[2] = nn::Conv2d(store, "vab.conv3", c, c, 3, 3, same, rng);
        conv_[3] = nn::Conv2d(store, "vab.conv4", c, cfg.vocab, 3, 3, same, rng);
        for (int i = 0; i < 3; ++i)
            bn_[i] = nn::StepBatchNorm(store, "vab.bn" + std::to_string(i + 1), c, cfg.max_steps);
        attention_ = nn::Conv2d(store, "vab.attention", c, 1, 1, 1, {}, rng);
    }

    const VabConfig& config() const { return cfg_; }

    VisualAttentionOutput forward(const ag::Var& pooled, const ag::Var& h_prev, bool training, int step) const {
        if (pooled->shape.size() != 4 || pooled->dim(1) != cfg_.channels)
            throw ShapeError("vab: pooled map " + ag::shape_str(pooled->shape) + ", expected " +
                             std::to_string(cfg_.channels) + " channels");
        if (h_prev->shape != ag::Shape{pooled->dim(0), cfg_.hidden})
            throw ShapeError("vab: previous output " + ag::shape_str(h_prev->shape));
        const int h = pooled->dim(2), w = pooled->dim(3);
        ag::Var cond = ag::broadcast_spatial(condition_(h_prev), h, w);
        ag::Var x = ag::concat1({pooled, cond});
        ag::Var a1 = ag::relu(bn_[0](conv_[0](x), training, step));
        ag::Var a2 = ag::relu(bn_[1](conv_[1](a1), training, step));
        ag::Var a3 = ag::relu(bn_[2](conv_[2](a2), training, step));
        VisualAttentionOutput out;
        out.logits = ag::global_avg_pool(conv_[3](a3));
        out.attention = ag::sigmoid(attention_(a3));
        out.attended = attend_visual(pooled, out.attention);
        return out;
    }

  private:
    VabConfig cfg_;
    nn::Linear condition_;
    nn::Conv2d conv_[4];
    nn::StepBatchNorm bn_[3];
    nn::Conv2d attention_;
};

// -log P(label), with P clamped below at 1e-12.
inline double branch_cross_entropy(std::span<const double> probs, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) throw ContractError("cross entropy: label out of range");
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], ag::kLogEpsilon));
}

// Summed over the steps of one sequence.
inline double vab_loss(const std::vector<std::vector<double>>& step_probs, const std::vector<int>& labels) {
    if (step_probs.size() != labels.size()) throw ContractError("vab_loss: steps and labels differ in length");
    double acc = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k) acc += branch_cross_entropy(step_probs[k], labels[k]);
    return acc;
}

} // namespace aben
