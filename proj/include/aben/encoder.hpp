#pragma once

// Convolutional backbone (image -> 7x7xC map) and the scene encoding
// x_f = [pooled target | pooled source | standardized relational features].

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "aben/autograd.hpp"
#include "aben/dataset.hpp"
#include "aben/image.hpp"
#include "aben/nn.hpp"

namespace aben {

inline constexpr int kFeatureGrid = 7;

struct BackboneConfig {
    int input_side = 224;
    int channels = 64;
    // A stride above 2 uses a patchifying kernel equal to the stride; otherwise 3x3 with padding 1.
    std::array<int, 4> strides = {4, 2, 2, 2};
};

inline int backbone_output_side(const BackboneConfig& cfg) {
    int side = cfg.input_side;
    for (int s : cfg.strides) {
        if (s <= 0) throw ConfigError("backbone stride must be positive");
        side = s > 2 ? (side - s) / s + 1 : (side + 2 - 3) / s + 1;
    }
    return side;
}

struct VisualFeatureMaps {
    int channels = 0;
    std::vector<double> values; // C x 7 x 7

    double at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * kFeatureGrid + y) * kFeatureGrid + x];
    }
};

// Four strided conv + ReLU layers shared by the target crop, the source crop
// and the full scene. Holds no mutable state.
class Backbone {
  public:
    Backbone() = default;
    Backbone(nn::ParameterStore& store, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (backbone_output_side(cfg) != kFeatureGrid)
            throw ConfigError("backbone: input side " + std::to_string(cfg.input_side) + " with the given strides yields " +
                              std::to_string(backbone_output_side(cfg)) + "x" +
                              std::to_string(backbone_output_side(cfg)) + ", expected 7x7");
        int in = 3;
        for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
            const int s = cfg.strides[i];
            const int k = s > 2 ? s : 3;
            const int pad = s > 2 ? 0 : 1;
            layers_.emplace_back(store, "backbone.conv" + std::to_string(i + 1), in, cfg.channels, k, k,
                                 ag::Conv2dGeometry{s, s, pad, pad}, rng);
            in = cfg.channels;
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    // images [B,3,S,S] in [0,1] -> [B,C,7,7]
    ag::Var features(const ag::Var& images) const {
        if (images->shape.size() != 4 || images->dim(1) != 3 || images->dim(2) != cfg_.input_side ||
            images->dim(3) != cfg_.input_side)
            throw ShapeError("backbone: expected [B,3," + std::to_string(cfg_.input_side) + "," +
                             std::to_string(cfg_.input_side) + "], got " + ag::shape_str(images->shape));
        ag::Var x = images;
        for (const auto& layer : layers_) x = ag::relu(layer(x));
        return x;
    }

    const std::vector<nn::Conv2d>& layers() const { return layers_; }

  private:
    BackboneConfig cfg_;
    std::vector<nn::Conv2d> layers_;
};

inline ag::Var image_batch(const std::vector<const Image*>& images, int side) {
    std::vector<double> data;
    for (const Image* img : images) {
        if (img->width != side || img->height != side)
            throw ShapeError("image batch: expected " + std::to_string(side) + "x" + std::to_string(side) + " input, got " +
                             std::to_string(img->width) + "x" + std::to_string(img->height));
        auto chw = img->to_chw();
        data.insert(data.end(), chw.begin(), chw.end());
    }
    return ag::constant({static_cast<int>(images.size()), 3, side, side}, std::move(data));
}

inline VisualFeatureMaps extract_visual_features(const Backbone& backbone, const Image& image) {
    ag::NoGrad guard;
    auto maps = backbone.features(image_batch({&image}, backbone.config().input_side));
    return {maps->dim(1), maps->value};
}

// Spatial mean per channel of the backbone map.
inline std::vector<double> pool_feature_maps(const VisualFeatureMaps& maps) {
    std::vector<double> out(static_cast<std::size_t>(maps.channels), 0.0);
    constexpr int plane = kFeatureGrid * kFeatureGrid;
    for (int c = 0; c < maps.channels; ++c) {
        double acc = 0.0;
        for (int i = 0; i < plane; ++i) acc += maps.values[static_cast<std::size_t>(c) * plane + i];
        out[static_cast<std::size_t>(c)] = acc / plane;
    }
    return out;
}

inline std::vector<double> encode_region(const Backbone& backbone, const Image& image) {
    return pool_feature_maps(extract_visual_features(backbone, image));
}

inline std::vector<double> assemble_scene_encoding(const std::vector<double>& target, const std::vector<double>& source,
                                                   const RelationalFeatures& rel) {
    if (target.size() != source.size())
        throw ShapeError("scene encoding: target has " + std::to_string(target.size()) + " channels, source " +
                         std::to_string(source.size()));
    std::vector<double> out;
    out.reserve(target.size() * 2 + kRelationalDims);
    out.insert(out.end(), target.begin(), target.end());
    out.insert(out.end(), source.begin(), source.end());
    out.insert(out.end(), rel.values.begin(), rel.values.end());
    return out;
}

inline int scene_encoding_size(int channels) { return 2 * channels + kRelationalDims; }

} // namespace aben
