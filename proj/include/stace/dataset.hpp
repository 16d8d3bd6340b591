#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stace/error.hpp"
#include "stace/tensor.hpp"

namespace stace {

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct LabeledVideo {
    std::string id;
    VideoTensor video;
    int label = 0;
    Split split = Split::Train;
    std::optional<VoxelMask> ground_truth;  // synthetic data only
};

struct LabeledDataset {
    std::vector<LabeledVideo> items;
    int num_classes = 0;

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].split == s) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> indices(Split s, int label) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].split == s && items[i].label == label) out.push_back(i);
        return out;
    }

    /// Throws InvalidArgument unless labels are in range, Y >= 2, and both splits are non-empty.
    void validate() const {
        detail::require(num_classes >= 2, "dataset needs at least 2 classes");
        bool any_train = false, any_test = false;
        for (const auto& it : items) {
            detail::require(it.label >= 0 && it.label < num_classes,
                            "label " + std::to_string(it.label) + " out of range for video " + it.id);
            (it.split == Split::Train ? any_train : any_test) = true;
        }
        detail::require(any_train && any_test, "dataset needs non-empty train and test splits");
    }
};

/// Per-channel mean intensity over the training split.
inline std::vector<float> dataset_mean(const LabeledDataset& ds) {
    const auto train = ds.indices(Split::Train);
    detail::require(!train.empty(), "dataset_mean: empty train split");
    const std::size_t channels = ds.items[train.front()].video.channels();
    std::vector<double> sum(channels, 0.0);
    std::size_t count = 0;
    for (auto i : train) {
        const auto& v = ds.items[i].video;
        detail::require(v.channels() == channels, "dataset_mean: inconsistent channel count");
        auto d = v.data();
        for (std::size_t k = 0; k < d.size(); ++k) sum[k % channels] += d[k];
        count += v.extent().voxels();
    }
    std::vector<float> mean(channels);
    for (std::size_t c = 0; c < channels; ++c) mean[c] = static_cast<float>(sum[c] / static_cast<double>(count));
    return mean;
}

// ---------------------------------------------------------------------------
// Synthetic moving-object dataset

enum class Shape { Square, Disk, Triangle, Cross, Ring, Diamond };
inline constexpr std::array kShapes{Shape::Square, Shape::Disk, Shape::Triangle,
                                    Shape::Cross, Shape::Ring, Shape::Diamond};

/// Unit motion directions as (dh, dw).
inline constexpr std::array<std::array<int, 2>, 8> kDirections{{
    {0, 1}, {1, 0}, {0, -1}, {-1, 0}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1},
}};

struct ClassSpec {
    Shape shape;
    std::array<int, 2> direction;
};

/// Class `c` takes shape c mod 6 and a direction that shifts by one per lap
/// through the shapes, so the first min(6, 8) classes differ in both factors
/// and all 48 (shape, direction) pairs are reachable.
inline ClassSpec class_spec(int c) {
    const auto ns = static_cast<int>(kShapes.size());
    const auto nd = static_cast<int>(kDirections.size());
    detail::require(c >= 0 && c < ns * nd, "synthetic class index out of range");
    return {kShapes[static_cast<std::size_t>(c % ns)],
            kDirections[static_cast<std::size_t>((c + c / ns) % nd)]};
}

/// Whether offset (dy, dx) from the object center lies inside `shape` of radius r.
inline bool shape_contains(Shape shape, double dy, double dx, double r) {
    const double ay = std::abs(dy), ax = std::abs(dx);
    switch (shape) {
        case Shape::Square: return ay <= r && ax <= r;
        case Shape::Disk: return dy * dy + dx * dx <= r * r;
        case Shape::Triangle:  // apex up, base at dy = +r
            return dy >= -r && dy <= r && ax <= (dy + r) * 0.5;
        case Shape::Cross: return (ay <= r && ax <= r * 0.35) || (ax <= r && ay <= r * 0.35);
        case Shape::Ring: {
            const double d2 = dy * dy + dx * dx;
            return d2 <= r * r && d2 >= 0.3 * r * r;
        }
        case Shape::Diamond: return ay + ax <= r;
    }
    return false;
}

struct SynthOptions {
    double background_level = 0.35;
    double background_amplitude = 0.2;  // peak-to-peak texture noise
    double test_fraction = 0.25;
};

/// Deterministic synthetic action dataset: each class is a bright object of a
/// class-specific shape moving in a class-specific direction over a static
/// noise texture. Ground-truth masks mark the object voxels.
inline LabeledDataset synth_dataset(int n_classes, int videos_per_class, Extent dims, std::uint64_t seed,
                                    const SynthOptions& opt = {}) {
    detail::require(n_classes >= 2, "synth_dataset: n_classes must be >= 2");
    detail::require(videos_per_class >= 2, "synth_dataset: videos_per_class must be >= 2");
    detail::require(dims.t >= 8 && dims.h >= 16 && dims.w >= 16, "synth_dataset: dims must be >= (8,16,16)");

    constexpr std::size_t channels = 3;
    const int n_test = std::clamp(static_cast<int>(std::lround(videos_per_class * opt.test_fraction)), 1,
                                  videos_per_class - 1);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    LabeledDataset ds;
    ds.num_classes = n_classes;
    const double radius = static_cast<double>(std::min(dims.h, dims.w)) / 6.0;
    // Total travel over the clip is half the frame.
    const double travel = 0.5 * static_cast<double>(std::min(dims.h, dims.w));

    for (int c = 0; c < n_classes; ++c) {
        const auto spec = class_spec(c);
        const double dh = spec.direction[0], dw = spec.direction[1];
        const double norm = std::sqrt(dh * dh + dw * dw);
        const double vh = travel * dh / norm / static_cast<double>(dims.t - 1);
        const double vw = travel * dw / norm / static_cast<double>(dims.t - 1);

        for (int k = 0; k < videos_per_class; ++k) {
            LabeledVideo item;
            item.id = "c" + std::to_string(c) + "_v" + std::to_string(k);
            item.label = c;
            item.split = k < videos_per_class - n_test ? Split::Train : Split::Test;

            // Static background texture.
            std::vector<float> texture(dims.h * dims.w * channels);
            for (auto& v : texture)
                v = static_cast<float>(opt.background_level + opt.background_amplitude * (unit(rng) - 0.5));

            std::array<float, channels> color{};
            for (std::size_t ch = 0; ch < channels; ++ch)
                color[ch] = static_cast<float>(std::array{0.95, 0.9, 0.75}[ch] + 0.05 * (unit(rng) - 0.5));

            // Start so the whole trajectory keeps the object inside the frame.
            auto start = [&](double extent, double vel) {
                const double span = vel * static_cast<double>(dims.t - 1);
                const double lo = radius + std::max(0.0, -span);
                const double hi = extent - 1.0 - radius - std::max(0.0, span);
                return lo + unit(rng) * std::max(0.0, hi - lo);
            };
            const double h0 = start(static_cast<double>(dims.h), vh);
            const double w0 = start(static_cast<double>(dims.w), vw);

            VideoTensor video(dims, channels);
            VoxelMask mask(dims);
            for (std::size_t t = 0; t < dims.t; ++t) {
                const double ch_ = h0 + vh * static_cast<double>(t);
                const double cw_ = w0 + vw * static_cast<double>(t);
                for (std::size_t h = 0; h < dims.h; ++h)
                    for (std::size_t w = 0; w < dims.w; ++w) {
                        const bool inside = shape_contains(spec.shape, static_cast<double>(h) - ch_,
                                                           static_cast<double>(w) - cw_, radius);
                        for (std::size_t ch = 0; ch < channels; ++ch)
                            video.at(t, h, w, ch) = inside ? color[ch] : texture[(h * dims.w + w) * channels + ch];
                        if (inside) mask.set(video.voxel_index(t, h, w));
                    }
            }
            item.video = std::move(video);
            item.ground_truth = std::move(mask);
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Manifest: one line per video, `<relative-tensor-path> <label-int> <split>`.
// A ground-truth mask, when present, sits next to the tensor as `<stem>.gt.stm0`.

inline std::string ground_truth_path(const std::string& tensor_path) {
    std::filesystem::path p(tensor_path);
    return (p.parent_path() / (p.stem().string() + ".gt.stm0")).string();
}

inline void save_dataset(const LabeledDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream manifest;
    for (const auto& it : ds.items) {
        const std::string rel = it.id + ".stv1";
        write_tensor((fs::path(dir) / rel).string(), it.video);
        if (it.ground_truth) write_mask(ground_truth_path((fs::path(dir) / rel).string()), *it.ground_truth);
        manifest << rel << ' ' << it.label << ' ' << to_string(it.split) << '\n';
    }
    binary::write_text((fs::path(dir) / "manifest.txt").string(), manifest.str());
}

inline LabeledDataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    std::istringstream in(binary::read_text(manifest_path));
    LabeledDataset ds;
    std::string line;
    std::size_t lineno = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string rel, split;
        int label = -1;
        if (!(ls >> rel >> label >> split) || (split != "train" && split != "test"))
            throw ParseError(ParseError::Kind::Syntax,
                             manifest_path + ":" + std::to_string(lineno) + ": expected `<path> <label> <train|test>`");
        if (label < 0) throw ParseError(ParseError::Kind::Syntax, manifest_path + ":" + std::to_string(lineno) + ": negative label");
        LabeledVideo item;
        item.id = fs::path(rel).stem().string();
        item.label = label;
        item.split = split == "train" ? Split::Train : Split::Test;
        const auto full = (base / rel).string();
        item.video = read_tensor(full);
        if (fs::exists(ground_truth_path(full))) item.ground_truth = read_mask(ground_truth_path(full));
        max_label = std::max(max_label, label);
        ds.items.push_back(std::move(item));
    }
    ds.num_classes = max_label + 1;
    ds.validate();
    return ds;
}

}  // namespace stace
