#pragma once

// Procedural scenes: a coloured piece of furniture with a smaller coloured
// object resting on it, described by template sentences.

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "aben/dataset.hpp"
#include "aben/image.hpp"
#include "aben/random.hpp"

namespace aben {

struct SyntheticScene {
    SceneSample sample;
    Image image;
};

struct SyntheticOptions {
    int width = 128;
    int height = 96;
    int references = 1;
};

namespace detail {

struct NamedColour {
    const char* name;
    double r, g, b;
};

inline constexpr std::array<NamedColour, 8> kColours = {{{"red", 0.85, 0.10, 0.10},
                                                         {"green", 0.10, 0.70, 0.20},
                                                         {"blue", 0.10, 0.25, 0.85},
                                                         {"yellow", 0.95, 0.85, 0.10},
                                                         {"white", 0.97, 0.97, 0.97},
                                                         {"black", 0.05, 0.05, 0.05},
                                                         {"orange", 0.95, 0.55, 0.10},
                                                         {"purple", 0.55, 0.15, 0.65}}};

struct ObjectShape {
    const char* name;
    double w, h; // fraction of the furniture width / image height
};

inline constexpr std::array<ObjectShape, 5> kObjects = {
    {{"bottle", 0.10, 0.30}, {"cup", 0.12, 0.14}, {"box", 0.28, 0.18}, {"can", 0.09, 0.17}, {"book", 0.30, 0.07}}};

inline constexpr std::array<const char*, 4> kFurniture = {"table", "shelf", "desk", "cabinet"};

inline std::string describe(int tmpl, const std::string& colour, const std::string& object, const std::string& base_colour,
                            const std::string& furniture, const std::string& side) {
    switch (tmpl % 4) {
    case 0: return "pick up the " + colour + " " + object + " on the " + base_colour + " " + furniture;
    case 1: return "bring me the " + colour + " " + object + " from the " + furniture;
    case 2: return "take the " + object + " on the " + side + " side of the " + base_colour + " " + furniture;
    default: return "fetch the " + colour + " " + object + " next to the " + side + " edge of the " + furniture;
    }
}

} // namespace detail

// `n` scenes whose first reference sentences are pairwise distinct.
inline std::vector<SyntheticScene> make_synthetic_scenes(int n, std::uint64_t seed, const SyntheticOptions& opt = {}) {
    Rng rng(seed);
    std::vector<SyntheticScene> out;
    std::set<std::string> used;
    const double W = opt.width, H = opt.height;
    int attempts = 0;
    while (static_cast<int>(out.size()) < n) {
        if (++attempts > 1000 * (n + 1)) throw ConfigError("synthetic: cannot draw enough distinct scenes");
        const auto& colour = detail::kColours[rng.below(detail::kColours.size())];
        const auto& base = detail::kColours[rng.below(detail::kColours.size())];
        if (&colour == &base) continue;
        const auto& obj = detail::kObjects[rng.below(detail::kObjects.size())];
        const std::size_t furniture = rng.below(detail::kFurniture.size());
        const int tmpl = static_cast<int>(rng.below(4));

        const double fw = std::round(W * rng.uniform(0.45, 0.8));
        const double fh = std::round(H * (0.25 + 0.1 * static_cast<double>(furniture)));
        const double fx = std::round(rng.uniform(0.0, W - fw));
        const double fy = H - fh;
        const double ow = std::max(3.0, std::round(fw * obj.w));
        const double oh = std::max(3.0, std::round(H * obj.h));
        const double ox = std::round(fx + rng.uniform(0.0, fw - ow));
        const double oy = std::max(0.0, fy - oh);
        const double centre = (ox + ow / 2 - fx) / fw;
        const std::string side = centre < 1.0 / 3 ? "left" : centre > 2.0 / 3 ? "right" : "middle";

        SyntheticScene s;
        s.image = Image(opt.width, opt.height, 0.5);
        s.image.fill_rect(static_cast<int>(fx), static_cast<int>(fy), static_cast<int>(fw), static_cast<int>(fh), base.r,
                          base.g, base.b);
        s.image.fill_rect(static_cast<int>(ox), static_cast<int>(oy), static_cast<int>(ow), static_cast<int>(oh), colour.r,
                          colour.g, colour.b);
        s.sample.width = opt.width;
        s.sample.height = opt.height;
        s.sample.target = {ox, oy, ow, oh};
        s.sample.source = {fx, fy, fw, fh};
        for (int r = 0; r < opt.references; ++r)
            s.sample.references.push_back(
                detail::describe(tmpl + r, colour.name, obj.name, base.name, detail::kFurniture[furniture], side));
        if (!used.insert(s.sample.references.front()).second) continue;
        out.push_back(std::move(s));
    }
    return out;
}

// Writes images/scene_<i>.png and scenes.jsonl under `dir`; returns the JSONL path.
inline std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, std::vector<SyntheticScene>& scenes) {
    std::filesystem::create_directories(dir / "images");
    std::vector<SceneSample> records;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%03zu.png", i);
        save_png(dir / "images" / name, scenes[i].image);
        scenes[i].sample.image_path = std::filesystem::path("images") / name;
        records.push_back(scenes[i].sample);
    }
    write_scene_records(dir / "scenes.jsonl", records);
    return dir / "scenes.jsonl";
}

} // namespace aben
