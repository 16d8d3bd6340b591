#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stace/binary_io.hpp"
#include "stace/tensor.hpp"

namespace stace {

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary PPM (P6) frames of `video`: voxels inside any of `masks` are blended
/// 50/50 with pure red, all others are dimmed by half. Single-channel videos
/// render as gray.
inline std::vector<std::vector<std::uint8_t>> overlay_frames(const VideoTensor& video, std::span<const VoxelMask> masks) {
    const Extent e = video.extent();
    VoxelMask highlight(e);
    for (const auto& m : masks) highlight |= m;

    std::vector<std::vector<std::uint8_t>> frames;
    const std::string header = "P6\n" + std::to_string(e.w) + " " + std::to_string(e.h) + "\n255\n";
    for (std::size_t t = 0; t < e.t; ++t) {
        std::vector<std::uint8_t> img(header.begin(), header.end());
        img.reserve(header.size() + e.h * e.w * 3);
        for (std::size_t h = 0; h < e.h; ++h)
            for (std::size_t w = 0; w < e.w; ++w) {
                const bool hi = highlight.at(t, h, w);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = video.at(t, h, w, std::min(c, video.channels() - 1));
                    const double red = c == 0 ? 1.0 : 0.0;
                    img.push_back(to_byte(hi ? 0.5 * v + 0.5 * red : 0.5 * v));
                }
            }
        frames.push_back(std::move(img));
    }
    return frames;
}

/// Writes `frame_%04d.ppm` files into `out_dir`.
inline void render_overlay(const VideoTensor& video, std::span<const VoxelMask> masks, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto frames = overlay_frames(video, masks);
    for (std::size_t t = 0; t < frames.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.ppm", t);
        binary::write_file((std::filesystem::path(out_dir) / name).string(), frames[t]);
    }
}

}  // namespace stace
