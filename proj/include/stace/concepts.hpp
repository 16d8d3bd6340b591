#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stace/convnet.hpp"
#include "stace/error.hpp"
#include "stace/supervoxel.hpp"
#include "stace/tensor.hpp"

namespace stace {

/// Row-major float matrix; one row per sample.
struct FeatureMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<float> data;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    void push_row(std::span<const float> r) {
        if (rows == 0 && cols == 0) cols = r.size();
        detail::require(r.size() == cols, "FeatureMatrix: row width mismatch");
        data.insert(data.end(), r.begin(), r.end());
        ++rows;
    }

    FeatureMatrix select(std::span<const std::size_t> idx) const {
        FeatureMatrix out(0, cols);
        out.data.reserve(idx.size() * cols);
        for (auto i : idx) out.push_row(row(i));
        return out;
    }

    friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s;
}

struct SegmentInput {
    SegmentRef source;
    VideoTensor tensor;
};

/// Crops the segment's bounding box, fills voxels outside the mask with the
/// dataset mean, resizes to `input_dims`, then re-fills through the
/// nearest-neighbor resized mask so the fill is bit-exact.
inline SegmentInput segment_to_input(const VideoTensor& video, const Segment& segment,
                                     std::span<const float> dataset_mean, Extent input_dims) {
    detail::require(segment.mask.extent() == video.extent(), "segment_to_input: segment does not belong to video");
    detail::require(dataset_mean.size() == video.channels(), "segment_to_input: mean/channel mismatch");
    detail::require(segment.mask.count() > 0, "segment_to_input: empty segment mask");

    const VoxelMask mask = crop(segment.mask, segment.bbox);
    const VideoTensor filler = constant_video(segment.bbox.extent(), dataset_mean);
    const VideoTensor cropped = compose_masked(filler, crop(video, segment.bbox), mask);
    const VideoTensor resized = resize_trilinear(cropped, input_dims);
    const VoxelMask resized_mask = resize_nearest(mask, input_dims);
    return {ref_of(segment), compose_masked(constant_video(input_dims, dataset_mean), resized, resized_mask)};
}

/// One activation row per input, in input order.
inline FeatureMatrix featurize(const ModelBackend& net, std::span<const VideoTensor> inputs, std::string_view layer) {
    FeatureMatrix out(0, net.layer_size(layer));
    out.data.reserve(inputs.size() * out.cols);
    for (const auto& in : inputs) out.push_row(net.activations(in, layer));
    return out;
}

inline FeatureMatrix featurize(const ModelBackend& net, std::span<const SegmentInput> inputs, std::string_view layer) {
    FeatureMatrix out(0, net.layer_size(layer));
    out.data.reserve(inputs.size() * out.cols);
    for (const auto& in : inputs) out.push_row(net.activations(in.tensor, layer));
    return out;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
    std::vector<std::size_t> assignments;
    FeatureMatrix centroids;
    double objective = 0.0;
    /// Objective after seeding and after each Lloyd iteration.
    std::vector<double> history;
};

namespace detail {

inline double kmeans_assign(const FeatureMatrix& x, const FeatureMatrix& c, std::vector<std::size_t>& assign,
                            std::vector<double>& dist) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c.rows; ++k) {
            const double d = squared_distance(x.row(i), c.row(k));
            if (d < bd) bd = d, best = k;
        }
        assign[i] = best;
        dist[i] = bd;
        total += bd;
    }
    return total;
}

inline double kmeans_objective(const FeatureMatrix& x, const FeatureMatrix& c, const std::vector<std::size_t>& assign) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) total += squared_distance(x.row(i), c.row(assign[i]));
    return total;
}

}  // namespace detail

/// Lloyd's k-means with k-means++ seeding. Empty clusters are re-seeded with
/// the point farthest from its centroid. Ties go to the lower cluster index.
inline KMeansResult kmeans_cluster(const FeatureMatrix& x, std::size_t C, std::size_t max_iters, std::uint64_t seed) {
    detail::require(C >= 1, "kmeans: C must be >= 1");
    detail::require(x.rows >= C, "kmeans: fewer rows than clusters");
    std::mt19937_64 rng(seed);
    const std::size_t n = x.rows, d = x.cols;

    FeatureMatrix centroids(0, d);
    std::vector<double> mind(n, std::numeric_limits<double>::infinity());
    std::vector<bool> chosen(n, false);
    auto add_center = [&](std::size_t i) {
        chosen[i] = true;
        centroids.push_row(x.row(i));
        for (std::size_t j = 0; j < n; ++j) mind[j] = std::min(mind[j], squared_distance(x.row(j), x.row(i)));
    };
    add_center(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    while (centroids.rows < C) {
        const double total = std::accumulate(mind.begin(), mind.end(), 0.0);
        std::size_t pick = n;
        if (total > 0.0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (std::size_t j = 0; j < n; ++j) {
                if (mind[j] <= 0.0) continue;
                pick = j;
                if ((r -= mind[j]) < 0.0) break;
            }
        } else {
            for (std::size_t j = 0; j < n && pick == n; ++j)
                if (!chosen[j]) pick = j;
        }
        add_center(pick);
    }

    KMeansResult res;
    res.assignments.assign(n, 0);
    std::vector<double> dist(n);
    res.objective = detail::kmeans_assign(x, centroids, res.assignments, dist);
    res.history.push_back(res.objective);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Update step.
        std::vector<std::size_t> assign = res.assignments;
        FeatureMatrix next(C, d);
        std::vector<double> sums(C * d, 0.0);
        std::vector<std::size_t> counts(C, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = assign[i];
            ++counts[k];
            for (std::size_t j = 0; j < d; ++j) sums[k * d + j] += x.row(i)[j];
        }
        for (std::size_t k = 0; k < C; ++k) {
            if (counts[k] == 0) continue;
            for (std::size_t j = 0; j < d; ++j)
                next.row(k)[j] = static_cast<float>(sums[k * d + j] / static_cast<double>(counts[k]));
        }
        for (std::size_t k = 0; k < C; ++k) {
            if (counts[k] != 0) continue;
            std::size_t far = 0;
            double fd = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dd = squared_distance(x.row(i), next.row(assign[i]));
                if (dd > fd && counts[assign[i]] > 1) fd = dd, far = i;
            }
            --counts[assign[far]];
            assign[far] = k;
            counts[k] = 1;
            std::copy(x.row(far).begin(), x.row(far).end(), next.row(k).begin());
        }
        // Float rounding of a mean can nudge the objective up by an ulp at the
        // fixed point; stop without committing in that case.
        const double updated = detail::kmeans_objective(x, next, assign);
        if (updated > res.objective) break;
        centroids = std::move(next);

        // Assignment step; never worse than `updated` since each point keeps
        // its current centroid unless another is strictly closer.
        const double assigned = detail::kmeans_assign(x, centroids, assign, dist);
        const bool changed = assign != res.assignments;
        res.assignments = std::move(assign);
        res.objective = assigned;
        res.history.push_back(res.objective);
        if (!changed) break;
    }
    res.centroids = std::move(centroids);
    return res;
}

/// Best of `restarts` runs seeded seed, seed+1, ...; ties keep the earliest.
inline KMeansResult kmeans_best(const FeatureMatrix& x, std::size_t C, std::size_t max_iters, std::uint64_t seed,
                                std::size_t restarts) {
    detail::require(restarts >= 1, "kmeans: restarts must be >= 1");
    KMeansResult best = kmeans_cluster(x, C, max_iters, seed);
    for (std::size_t r = 1; r < restarts; ++r) {
        auto run = kmeans_cluster(x, C, max_iters, seed + r);
        if (run.objective < best.objective) best = std::move(run);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Concepts

struct Concept {
    int class_label = 0;
    int id = 0;
    std::vector<SegmentRef> members;
    std::vector<float> centroid;
    std::size_t n_videos = 0;
};

/// Groups segments by cluster, drops clusters with fewer than `min_size`
/// members or `min_videos` distinct source videos, and re-indexes survivors
/// from 0 in cluster order.
inline std::vector<Concept> build_concepts(int class_label, std::span<const SegmentRef> segments,
                                           std::span<const std::size_t> assignments, const FeatureMatrix& centroids,
                                           std::size_t min_size, std::size_t min_videos) {
    detail::require(assignments.size() == segments.size(), "build_concepts: assignments/segments length mismatch");
    std::vector<std::vector<std::size_t>> clusters(centroids.rows);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        detail::require(assignments[i] < centroids.rows, "build_concepts: assignment out of range");
        clusters[assignments[i]].push_back(i);
    }
    std::vector<Concept> out;
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        const auto& members = clusters[k];
        std::set<std::string> videos;
        for (auto i : members) videos.insert(segments[i].video_id);
        if (members.empty() || members.size() < min_size || videos.size() < min_videos) continue;
        Concept c;
        c.class_label = class_label;
        c.id = static_cast<int>(out.size());
        for (auto i : members) c.members.push_back(segments[i]);
        c.centroid.assign(centroids.row(k).begin(), centroids.row(k).end());
        c.n_videos = videos.size();
        out.push_back(std::move(c));
    }
    return out;
}

// Concept inventory JSON: [{class, id, n_videos, members: [{video, level, label}], centroid: [...]}]

inline nlohmann::json to_json(const SegmentRef& r) {
    return {{"video", r.video_id}, {"level", to_string(r.level)}, {"label", r.label_id}};
}

inline SegmentRef segment_ref_from_json(const nlohmann::json& j) {
    return {j.at("video").get<std::string>(), level_from_string(j.at("level").get<std::string>()),
            j.at("label").get<std::uint32_t>()};
}

inline nlohmann::json concepts_to_json(std::span<const Concept> concepts) {
    auto arr = nlohmann::json::array();
    for (const auto& c : concepts) {
        nlohmann::json members = nlohmann::json::array();
        for (const auto& m : c.members) members.push_back(to_json(m));
        arr.push_back({{"class", c.class_label},
                       {"id", c.id},
                       {"n_videos", c.n_videos},
                       {"members", std::move(members)},
                       {"centroid", c.centroid}});
    }
    return arr;
}

inline std::vector<Concept> concepts_from_json(const nlohmann::json& j) {
    std::vector<Concept> out;
    for (const auto& e : j) {
        Concept c;
        c.class_label = e.at("class").get<int>();
        c.id = e.at("id").get<int>();
        c.n_videos = e.at("n_videos").get<std::size_t>();
        for (const auto& m : e.at("members")) c.members.push_back(segment_ref_from_json(m));
        c.centroid = e.at("centroid").get<std::vector<float>>();
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace stace
