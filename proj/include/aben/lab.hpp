#pragma once

// Linguistic attention branch over the last N decoder outputs.
//
// The context c_k stacks h_{k-N}..h_{k-1}; slots older than step 1 hold the
// projected scene encoding. Three 1-D convolutions along the slot axis feed
// the P_l head, a 1x1 convolution on the second one gives the per-slot
// weights a_k, and the weighted context is o_j = (1 + w_j) h_j.

#include <algorithm>
#include <string>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/nn.hpp"
#include "aben/vab.hpp"

namespace aben {

struct LabConfig {
    int hidden = 768;
    int context = 10;
    int vocab = 0;
    int max_steps = 31;
};

struct LinguisticAttentionOutput {
    ag::Var logits;   // [B,V]
    ag::Var weights;  // [B,1,1,N], a_k
    ag::Var weighted; // [B,d,1,N], l_k
    ag::Var rows;     // [B,N*d], l_k flattened slot-major
};

// Slots for step k given h_1..h_{k-1}: most recent outputs trail, the rest
// are filled with the encoder projection.
inline std::vector<ag::Var> context_slots(const std::vector<ag::Var>& history, const ag::Var& encoder_projection,
                                          int n) {
    if (n < 1) throw ConfigError("linguistic context size must be >= 1");
    const int available = std::min<int>(static_cast<int>(history.size()), n);
    std::vector<ag::Var> slots;
    slots.reserve(static_cast<std::size_t>(n));
    for (int j = 0; j < n - available; ++j) slots.push_back(encoder_projection);
    for (std::size_t t = history.size() - static_cast<std::size_t>(available); t < history.size(); ++t)
        slots.push_back(history[t]);
    return slots;
}

// [B,d,1,N]
inline ag::Var build_context(const std::vector<ag::Var>& history, const ag::Var& encoder_projection, int n) {
    return ag::stack_slots(context_slots(history, encoder_projection, n));
}

// l_k = (1 + a_k) * c_k slot-wise.
inline ag::Var weight_context(const ag::Var& context, const ag::Var& weights) {
    return ag::residual_mask(context, weights);
}

class LinguisticAttentionBranch {
  public:
    LinguisticAttentionBranch() = default;
    LinguisticAttentionBranch(nn::ParameterStore& store, const LabConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.vocab <= 0) throw ConfigError("lab: vocabulary size must be positive");
        const int d = cfg.hidden;
        const ag::Conv2dGeometry along_slots{1, 1, 0, 1};
        for (int i = 0; i < 3; ++i) {
            conv_[i] = nn::Conv2d(store, "lab.conv" + std::to_string(i + 1), d, d, 1, 3, along_slots, rng);
            bn_[i] = nn::StepBatchNorm(store, "lab.bn" + std::to_string(i + 1), d, cfg.max_steps);
        }
        head_ = nn::Linear(store, "lab.head", d * cfg.context, cfg.vocab, rng);
        attention_ = nn::Conv2d(store, "lab.attention", d, 1, 1, 1, {}, rng);
        attention_bn_ = nn::StepBatchNorm(store, "lab.attention_bn", 1, cfg.max_steps);
    }

    const LabConfig& config() const { return cfg_; }

    LinguisticAttentionOutput forward(const ag::Var& context, bool training, int step) const {
        if (context->shape.size() != 4 || context->dim(1) != cfg_.hidden || context->dim(2) != 1 ||
            context->dim(3) != cfg_.context)
            throw ShapeError("lab: context " + ag::shape_str(context->shape) + ", expected [B," +
                             std::to_string(cfg_.hidden) + ",1," + std::to_string(cfg_.context) + "]");
        ag::Var b1 = ag::relu(bn_[0](conv_[0](context), training, step));
        ag::Var b2 = ag::relu(bn_[1](conv_[1](b1), training, step));
        ag::Var b3 = ag::relu(bn_[2](conv_[2](b2), training, step));
        LinguisticAttentionOutput out;
        out.logits = head_(ag::flatten(b3));
        out.weights = ag::sigmoid(attention_bn_(attention_(b2), training, step));
        out.weighted = weight_context(context, out.weights);
        out.rows = ag::slots_to_rows(out.weighted);
        return out;
    }

  private:
    LabConfig cfg_;
    nn::Conv2d conv_[3];
    nn::StepBatchNorm bn_[3];
    nn::Linear head_;
    nn::Conv2d attention_;
    nn::StepBatchNorm attention_bn_;
};

inline double lab_loss(const std::vector<std::vector<double>>& step_probs, const std::vector<int>& labels) {
    return vab_loss(step_probs, labels);
}

} // namespace aben
