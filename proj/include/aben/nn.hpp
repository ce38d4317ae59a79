#pragma once

// Parameter registry and the small layer set the network is built from.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/random.hpp"

namespace aben::nn {

using ag::Var;

// Named tensors owned by a model. Parameters are optimised; buffers (running
// statistics, frozen tables) are stored and checkpointed but never updated by
// the optimiser.
class ParameterStore {
  public:
    struct Entry {
        std::string name;
        Var var;
        bool trainable;
    };

    Var add(const std::string& name, ag::Shape shape, std::vector<double> values, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Var v = trainable ? ag::leaf(std::move(shape), std::move(values)) : ag::constant(std::move(shape), std::move(values));
        index_[name] = entries_.size();
        entries_.push_back({name, v, trainable});
        return v;
    }

    Var get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].var;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<Entry>& entries() const { return entries_; }

    std::vector<Var> trainable() const {
        std::vector<Var> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.var);
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.var->size();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_)
            if (e.trainable) std::fill(e.var->grad.begin(), e.var->grad.end(), 0.0);
    }

    // Running statistics, one slot per decoding step.
    std::vector<ag::BatchNormStats>& bn_slots(const std::string& name) { return bn_[name]; }
    const std::map<std::string, std::vector<ag::BatchNormStats>>& bn_buffers() const { return bn_; }
    std::map<std::string, std::vector<ag::BatchNormStats>>& bn_buffers() { return bn_; }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::vector<ag::BatchNormStats>> bn_;
};

inline std::vector<double> uniform_init(Rng& rng, std::size_t n, double bound) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return v;
}

struct Linear {
    Var weight;
    Var bias;

    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng) {
        const double bound = std::sqrt(6.0 / (in + out));
        weight = store.add(name + ".weight", {out, in}, uniform_init(rng, static_cast<std::size_t>(in) * out, bound));
        bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    }

    int in_features() const { return weight->dim(1); }
    int out_features() const { return weight->dim(0); }

    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
};

struct Conv2d {
    Var weight;
    Var bias;
    ag::Conv2dGeometry geometry;

    Conv2d() = default;
    Conv2d(ParameterStore& store, const std::string& name, int in, int out, int kh, int kw, ag::Conv2dGeometry g,
           Rng& rng)
        : geometry(g) {
        const double bound = std::sqrt(6.0 / (in * kh * kw));
        weight = store.add(name + ".weight", {out, in, kh, kw},
                           uniform_init(rng, static_cast<std::size_t>(out) * in * kh * kw, bound));
        bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    }

    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, geometry); }
};

// Batch normalisation with running statistics kept per decoding step, so that
// evaluation at step k uses statistics gathered at step k during training.
class StepBatchNorm {
  public:
    StepBatchNorm() = default;
    StepBatchNorm(ParameterStore& store, const std::string& name, int channels, int max_steps)
        : store_(&store), name_(name), max_steps_(max_steps) {
        gamma_ = store.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
        beta_ = store.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
        auto& slots = store.bn_slots(name);
        slots.resize(static_cast<std::size_t>(max_steps));
        for (auto& s : slots) {
            s.mean.assign(channels, 0.0);
            s.var.assign(channels, 1.0);
        }
    }

    Var operator()(const Var& x, bool training, int step) const {
        auto& slots = store_->bn_slots(name_);
        const int slot = std::clamp(step, 0, max_steps_ - 1);
        return ag::batch_norm(x, gamma_, beta_, slots[static_cast<std::size_t>(slot)], training);
    }

    Var gamma() const { return gamma_; }
    Var beta() const { return beta_; }

  private:
    ParameterStore* store_ = nullptr;
    std::string name_;
    int max_steps_ = 1;
    Var gamma_;
    Var beta_;
};

} // namespace aben::nn
