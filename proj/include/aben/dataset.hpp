#pragma once

// Scene records, relational geometry features, sentence clean-up and
// scene-level train/validation/test splitting.

#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "aben/errors.hpp"
#include "aben/image.hpp"
#include "aben/random.hpp"

namespace aben {

namespace fs = std::filesystem;

inline constexpr int kRelationalDims = 15;

struct SceneSample {
    fs::path image_path;
    int width = 0;
    int height = 0;
    BoundingBox target;
    BoundingBox source;
    std::vector<std::string> references; // preprocessed
};

struct RelationalFeatures {
    std::array<double, kRelationalDims> values{};

    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    bool operator==(const RelationalFeatures&) const = default;
};

// r_{l/m} = [x_l/W_m, y_l/H_m, w_l/W_m, h_l/H_m, w_l h_l / (W_m H_m)]
inline std::array<double, 5> relation_block(const BoundingBox& l, double wm, double hm) {
    if (!(wm * hm != 0.0) || !std::isfinite(wm * hm))
        throw GeometryError("relational feature: reference component has zero area");
    return {l.x / wm, l.y / hm, l.w / wm, l.h / hm, (l.w * l.h) / (wm * hm)};
}

// Blocks ordered [target/source, target/image, source/image].
inline RelationalFeatures compute_relational_features(const BoundingBox& target, const BoundingBox& source,
                                                      double image_width, double image_height) {
    if (image_width <= 0.0 || image_height <= 0.0) throw GeometryError("image dimensions must be positive");
    for (const auto* b : {&target, &source})
        if (auto p = box_problem(*b, image_width, image_height); !p.empty()) throw GeometryError(p);
    RelationalFeatures f;
    const std::array<std::array<double, 5>, 3> blocks = {relation_block(target, source.w, source.h),
                                                         relation_block(target, image_width, image_height),
                                                         relation_block(source, image_width, image_height)};
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 5; ++i) f[b * 5 + i] = blocks[b][i];
    return f;
}

inline RelationalFeatures compute_relational_features(const SceneSample& s) {
    return compute_relational_features(s.target, s.source, s.width, s.height);
}

// Per-dimension population mean and standard deviation.
struct StandardizationStats {
    std::array<double, kRelationalDims> mean{};
    std::array<double, kRelationalDims> std{};
};

inline StandardizationStats fit_standardizer(const std::vector<RelationalFeatures>& train) {
    if (train.empty()) throw ContractError("fit_standardizer: empty training set");
    StandardizationStats st;
    const double n = static_cast<double>(train.size());
    for (std::size_t d = 0; d < kRelationalDims; ++d) {
        double acc = 0.0;
        for (const auto& f : train) acc += f[d];
        const double mean = acc / n;
        double sq = 0.0;
        for (const auto& f : train) sq += (f[d] - mean) * (f[d] - mean);
        st.mean[d] = mean;
        st.std[d] = std::sqrt(sq / n);
    }
    return st;
}

// Zero-variance dimensions are centred but not scaled.
inline RelationalFeatures apply_standardizer(const RelationalFeatures& f, const StandardizationStats& st) {
    RelationalFeatures out;
    for (std::size_t d = 0; d < kRelationalDims; ++d) {
        const double centred = f[d] - st.mean[d];
        out[d] = st.std[d] > 0.0 ? centred / st.std[d] : centred;
    }
    return out;
}

inline RelationalFeatures invert_standardizer(const RelationalFeatures& z, const StandardizationStats& st) {
    RelationalFeatures out;
    for (std::size_t d = 0; d < kRelationalDims; ++d)
        out[d] = (st.std[d] > 0.0 ? z[d] * st.std[d] : z[d]) + st.mean[d];
    return out;
}

// Lowercases, drops every period, collapses whitespace runs and trims.
inline std::string preprocess_sentence(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (char ch : raw) {
        if (ch == '.') continue;
        if (std::isspace(static_cast<unsigned char>(ch))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    if (out.empty()) throw ValidationError("sentence is empty after preprocessing");
    return out;
}

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

struct RejectedRecord {
    std::size_t line = 0;
    std::string image;
    std::vector<std::string> reasons;
};

struct ValidationReport {
    std::size_t total_records = 0;
    std::size_t accepted = 0;
    std::vector<RejectedRecord> rejected;

    nlohmann::json to_json() const {
        nlohmann::json rej = nlohmann::json::array();
        for (const auto& r : rejected) rej.push_back({{"line", r.line}, {"image", r.image}, {"reasons", r.reasons}});
        return {{"total_records", total_records}, {"accepted", accepted}, {"rejected", rej}};
    }
};

struct DatasetSplit {
    std::vector<SceneSample> train;
    std::vector<SceneSample> validation;
    std::vector<SceneSample> test;
    StandardizationStats standardization;
    ValidationReport report;
};

struct ScenePair {
    const SceneSample* scene;
    std::string sentence;
};

inline std::vector<ScenePair> expand_pairs(const std::vector<SceneSample>& scenes) {
    std::vector<ScenePair> pairs;
    for (const auto& s : scenes)
        for (const auto& r : s.references) pairs.push_back({&s, r});
    return pairs;
}

inline nlohmann::json stats_to_json(const StandardizationStats& st) {
    return {{"mean", st.mean}, {"std", st.std}};
}

inline StandardizationStats stats_from_json(const nlohmann::json& j) {
    StandardizationStats st;
    st.mean = j.at("mean").get<std::array<double, kRelationalDims>>();
    st.std = j.at("std").get<std::array<double, kRelationalDims>>();
    return st;
}

namespace detail {

inline std::optional<BoundingBox> parse_box(const nlohmann::json& j, const char* key, std::vector<std::string>& why) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 4) {
        why.push_back(std::string(key) + ": expected [x, y, w, h]");
        return std::nullopt;
    }
    for (const auto& v : j[key])
        if (!v.is_number()) {
            why.push_back(std::string(key) + ": coordinates must be numbers");
            return std::nullopt;
        }
    return BoundingBox{j[key][0].get<double>(), j[key][1].get<double>(), j[key][2].get<double>(),
                       j[key][3].get<double>()};
}

} // namespace detail

// Validates one parsed record; on failure returns nullopt and fills `reasons`.
inline std::optional<SceneSample> validate_record(const nlohmann::json& j, const fs::path& base_dir,
                                                  std::vector<std::string>& reasons, bool check_image_file) {
    if (!j.is_object()) {
        reasons.push_back("record is not a JSON object");
        return std::nullopt;
    }
    static const std::array<const char*, 6> known = {"image", "width", "height", "target", "source", "sentences"};
    for (const auto& [k, _] : j.items())
        if (std::find_if(known.begin(), known.end(), [&](const char* n) { return k == n; }) == known.end())
            reasons.push_back("unknown field: " + k);
    SceneSample s;
    if (!j.contains("image") || !j["image"].is_string() || j["image"].get<std::string>().empty()) {
        reasons.push_back("image: expected non-empty string");
    } else {
        fs::path p = j["image"].get<std::string>();
        s.image_path = p.is_absolute() ? p : base_dir / p;
        if (check_image_file && !fs::exists(s.image_path)) reasons.push_back("image file not found: " + s.image_path.string());
    }
    bool dims_ok = true;
    for (const char* key : {"width", "height"}) {
        if (!j.contains(key) || !j[key].is_number_integer() || j[key].get<long long>() <= 0 ||
            j[key].get<long long>() > std::numeric_limits<int>::max()) {
            reasons.push_back(std::string(key) + ": expected positive integer");
            dims_ok = false;
        }
    }
    if (dims_ok) {
        s.width = j["width"].get<int>();
        s.height = j["height"].get<int>();
    }
    auto target = detail::parse_box(j, "target", reasons);
    auto source = detail::parse_box(j, "source", reasons);
    if (target && s.width > 0) {
        if (auto p = box_problem(*target, s.width, s.height); !p.empty()) reasons.push_back("target: " + p);
        s.target = *target;
    }
    if (source && s.width > 0) {
        if (auto p = box_problem(*source, s.width, s.height); !p.empty()) reasons.push_back("source: " + p);
        s.source = *source;
    }
    if (!j.contains("sentences") || !j["sentences"].is_array() || j["sentences"].empty()) {
        reasons.push_back("sentences: expected non-empty array");
    } else {
        for (const auto& sent : j["sentences"]) {
            if (!sent.is_string()) {
                reasons.push_back("sentences: entries must be strings");
                continue;
            }
            try {
                s.references.push_back(preprocess_sentence(sent.get<std::string>()));
            } catch (const ValidationError& e) {
                reasons.push_back(std::string("sentences: ") + e.what());
            }
        }
    }
    if (!reasons.empty()) return std::nullopt;
    return s;
}

struct LoadedRecords {
    std::vector<SceneSample> scenes;
    ValidationReport report;
};

// Reads a JSONL scene file. Malformed JSON throws ParseError with the line
// number; records that parse but violate invariants are reported and skipped.
inline LoadedRecords read_scene_records(const fs::path& path, bool check_image_files = true) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path.string());
    LoadedRecords out;
    const fs::path base = path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(lineno, e.what());
        }
        ++out.report.total_records;
        std::vector<std::string> reasons;
        auto scene = validate_record(j, base, reasons, check_image_files);
        if (scene) {
            out.scenes.push_back(std::move(*scene));
            ++out.report.accepted;
        } else {
            std::string img = j.is_object() && j.contains("image") && j["image"].is_string() ? j["image"].get<std::string>() : "";
            out.report.rejected.push_back({lineno, img, reasons});
        }
    }
    return out;
}

// Scene-image counts for each split: validation and test take round(n * ratio),
// train receives the remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& r) {
    const double sum = r.train + r.validation + r.test;
    if (r.train < 0 || r.validation < 0 || r.test < 0 || std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("split ratios must be non-negative and sum to 1");
    std::size_t val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.validation));
    std::size_t test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.test));
    if (val + test > n) throw ConfigError("split ratios leave no room for training scenes");
    return {n - val - test, val, test};
}

// Groups records by image so that every split sees disjoint imagery.
inline DatasetSplit split_scenes(std::vector<SceneSample> scenes, const SplitRatios& ratios, std::uint64_t seed) {
    std::vector<std::string> images;
    std::map<std::string, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const std::string key = scenes[i].image_path.lexically_normal().string();
        if (!by_image.count(key)) images.push_back(key);
        by_image[key].push_back(i);
    }
    Rng rng(seed);
    rng.shuffle(images);
    const auto sizes = split_sizes(images.size(), ratios);
    DatasetSplit split;
    for (std::size_t k = 0; k < images.size(); ++k) {
        auto& dst = k < sizes[0] ? split.train : (k < sizes[0] + sizes[1] ? split.validation : split.test);
        for (std::size_t idx : by_image[images[k]]) dst.push_back(scenes[idx]);
    }
    if (!split.train.empty()) {
        std::vector<RelationalFeatures> feats;
        for (const auto& p : expand_pairs(split.train)) feats.push_back(compute_relational_features(*p.scene));
        split.standardization = fit_standardizer(feats);
    }
    return split;
}

inline DatasetSplit load_dataset(const fs::path& path, const SplitRatios& ratios, std::uint64_t seed,
                                 bool check_image_files = true) {
    auto records = read_scene_records(path, check_image_files);
    auto split = split_scenes(std::move(records.scenes), ratios, seed);
    split.report = std::move(records.report);
    return split;
}

inline nlohmann::json scene_to_json(const SceneSample& s) {
    return {{"image", s.image_path.string()},
            {"width", s.width},
            {"height", s.height},
            {"target", {s.target.x, s.target.y, s.target.w, s.target.h}},
            {"source", {s.source.x, s.source.y, s.source.w, s.source.h}},
            {"sentences", s.references}};
}

inline void write_scene_records(const fs::path& path, const std::vector<SceneSample>& scenes) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
}

} // namespace aben
