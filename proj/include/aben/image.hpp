#pragma once

// RGB images as HWC doubles in [0, 1], bilinear crop-resize, and PNG/JPEG I/O.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "aben/errors.hpp"

namespace aben {

struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    bool operator==(const BoundingBox&) const = default;
};

// Empty string when the box is valid inside a width x height image.
inline std::string box_problem(const BoundingBox& b, double width, double height) {
    if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) || !std::isfinite(b.h))
        return "non-finite coordinate";
    if (b.w <= 0.0) return "width must be > 0";
    if (b.h <= 0.0) return "height must be > 0";
    if (b.x < 0.0 || b.y < 0.0) return "origin must be non-negative";
    if (b.x + b.w > width || b.y + b.h > height) return "box exceeds image bounds";
    return {};
}

struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> rgb; // row-major HWC

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

    double& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    void fill_rect(int x0, int y0, int w, int h, double r, double g, double b) {
        for (int y = std::max(0, y0); y < std::min(height, y0 + h); ++y)
            for (int x = std::max(0, x0); x < std::min(width, x0 + w); ++x) {
                at(x, y, 0) = r;
                at(x, y, 1) = g;
                at(x, y, 2) = b;
            }
    }

    // CHW copy, the layout the convolutional backbone consumes.
    std::vector<double> to_chw() const {
        std::vector<double> out(rgb.size());
        const std::size_t plane = static_cast<std::size_t>(width) * height;
        for (std::size_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c) out[c * plane + p] = rgb[p * 3 + c];
        return out;
    }
};

inline Image load_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot read image: " + path.string());
    Image img(bgr.cols, bgr.rows);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[x][2 - c] / 255.0;
    }
    return img;
}

inline void save_png(const std::filesystem::path& path, const Image& img) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(img.at(x, y, c), 0.0, 1.0) * 255.0));
    }
    if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image: " + path.string());
}

// Bilinear sample at continuous pixel-centre coordinates, clamped to [x0,x1]x[y0,y1].
inline double sample_bilinear(const Image& img, double sx, double sy, int c, int x0, int x1, int y0, int y1) {
    sx = std::clamp(sx, static_cast<double>(x0), static_cast<double>(x1));
    sy = std::clamp(sy, static_cast<double>(y0), static_cast<double>(y1));
    const int ix = std::min(static_cast<int>(std::floor(sx)), x1);
    const int iy = std::min(static_cast<int>(std::floor(sy)), y1);
    const int jx = std::min(ix + 1, x1);
    const int jy = std::min(iy + 1, y1);
    const double fx = sx - ix;
    const double fy = sy - iy;
    const double top = img.at(ix, iy, c) * (1.0 - fx) + img.at(jx, iy, c) * fx;
    const double bot = img.at(ix, jy, c) * (1.0 - fx) + img.at(jx, jy, c) * fx;
    return top * (1.0 - fy) + bot * fy;
}

// Crops `box` and resizes it to side x side with half-pixel-centre bilinear
// sampling. Output values stay in [0, 1].
inline Image crop_and_resize(const Image& img, const BoundingBox& box, int side = 224) {
    if (side <= 0) throw ShapeError("crop_and_resize: side must be positive");
    if (auto problem = box_problem(box, img.width, img.height); !problem.empty())
        throw GeometryError("crop_and_resize: " + problem);
    const int x0 = static_cast<int>(std::floor(box.x));
    const int y0 = static_cast<int>(std::floor(box.y));
    const int x1 = std::clamp(static_cast<int>(std::ceil(box.x + box.w)) - 1, x0, img.width - 1);
    const int y1 = std::clamp(static_cast<int>(std::ceil(box.y + box.h)) - 1, y0, img.height - 1);
    Image out(side, side);
    const double scale_x = box.w / side;
    const double scale_y = box.h / side;
    for (int y = 0; y < side; ++y) {
        const double sy = box.y + (y + 0.5) * scale_y - 0.5;
        for (int x = 0; x < side; ++x) {
            const double sx = box.x + (x + 0.5) * scale_x - 0.5;
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = sample_bilinear(img, sx, sy, c, x0, x1, y0, y1);
        }
    }
    return out;
}

inline Image resize_full(const Image& img, int side) {
    return crop_and_resize(img, BoundingBox{0, 0, static_cast<double>(img.width), static_cast<double>(img.height)},
                           side);
}

} // namespace aben
