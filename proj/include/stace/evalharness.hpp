#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stace/concepts.hpp"
#include "stace/scoring.hpp"

namespace stace {

/// Nearest concept centroid (squared Euclidean) for each feature row; ties go
/// to the lower concept id.
inline std::vector<int> nearest_concepts(const FeatureMatrix& features, std::span<const Concept> concepts) {
    detail::require(!concepts.empty(), "index_video_concepts: concept list is empty");
    std::vector<int> out(features.rows);
    for (std::size_t i = 0; i < features.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int best_id = 0;
        for (const auto& c : concepts) {
            detail::require(c.centroid.size() == features.cols, "concept centroid width mismatch");
            const double d = squared_distance(features.row(i), c.centroid);
            if (d < best || (d == best && c.id < best_id)) best = d, best_id = c.id;
        }
        out[i] = best_id;
    }
    return out;
}

/// A test video with its surviving segments, each mapped to one concept of the
/// video's own class.
struct IndexedVideo {
    std::string video_id;
    int label = 0;
    VideoTensor video;
    std::vector<VoxelMask> masks;
    std::vector<int> concept_of;  // parallel to masks
};

inline IndexedVideo index_video_concepts(const ModelBackend& net, const std::string& video_id, int label,
                                         const VideoTensor& video, std::span<const Segment> segments,
                                         std::span<const float> dataset_mean, std::span<const Concept> concepts,
                                         std::string_view layer) {
    std::vector<SegmentInput> inputs;
    inputs.reserve(segments.size());
    for (const auto& s : segments) inputs.push_back(segment_to_input(video, s, dataset_mean, net.input_extent()));
    IndexedVideo iv{video_id, label, video, {}, nearest_concepts(featurize(net, inputs, layer), concepts)};
    for (const auto& s : segments) iv.masks.push_back(s.mask);
    return iv;
}

enum class Selection { Top, Random, Least };
enum class EvalMode { Add, Remove };

inline const char* to_string(Selection s) {
    switch (s) {
        case Selection::Top: return "top";
        case Selection::Random: return "random";
        case Selection::Least: return "least";
    }
    return "?";
}

inline const char* to_string(EvalMode m) { return m == EvalMode::Add ? "add" : "remove"; }

struct EvalOutcome {
    double accuracy = 0.0;  // percent
    std::vector<std::string> warnings;
};

/// The k concepts of `report` chosen by `selection`; k is clamped to the
/// concept count with a warning. Random draws are a seeded shuffle per class,
/// so random selections are nested across k.
inline std::vector<int> select_concepts(const ImportanceReport& report, Selection selection, std::size_t k,
                                        std::uint64_t seed, std::vector<std::string>* warnings = nullptr) {
    const auto& rank = report.ranking;
    if (k > rank.size()) {
        if (warnings)
            warnings->push_back("class " + std::to_string(report.class_label) + ": k=" + std::to_string(k) + " exceeds " +
                                std::to_string(rank.size()) + " concepts; clamped");
        k = rank.size();
    }
    switch (selection) {
        case Selection::Top: return {rank.begin(), rank.begin() + static_cast<std::ptrdiff_t>(k)};
        case Selection::Least: return {rank.end() - static_cast<std::ptrdiff_t>(k), rank.end()};
        case Selection::Random: {
            std::vector<int> ids = rank;
            std::sort(ids.begin(), ids.end());
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(report.class_label)};
            std::mt19937_64 rng(seq);
            std::shuffle(ids.begin(), ids.end(), rng);
            ids.resize(k);
            return ids;
        }
    }
    return {};
}

/// The input fed to the model for one video under (mode, chosen concepts).
inline VideoTensor compose_for_eval(const IndexedVideo& iv, const VideoTensor& mean_video, EvalMode mode,
                                    std::span<const int> chosen) {
    VoxelMask selected(iv.video.extent());
    for (std::size_t s = 0; s < iv.masks.size(); ++s)
        if (std::find(chosen.begin(), chosen.end(), iv.concept_of[s]) != chosen.end()) selected |= iv.masks[s];
    return mode == EvalMode::Add ? compose_masked(mean_video, iv.video, selected)
                                 : compose_masked(iv.video, mean_video, selected);
}

/// Percent of videos classified correctly after adding (pasting onto the
/// dataset-mean video) or removing (overwriting with the mean) the segments of
/// k selected concepts of each video's class. k = 0 is the unmodified base case.
inline EvalOutcome eval_concepts(const ModelBackend& net, std::span<const IndexedVideo> videos,
                                 const std::map<int, ImportanceReport>& reports, std::span<const float> dataset_mean,
                                 EvalMode mode, Selection selection, std::size_t k, std::uint64_t seed) {
    detail::require(!videos.empty(), "eval: no test videos");
    EvalOutcome out;
    std::map<int, std::vector<int>> chosen;
    for (const auto& [y, rep] : reports) chosen[y] = select_concepts(rep, selection, k, seed, &out.warnings);

    std::size_t correct = 0;
    for (const auto& iv : videos) {
        const VideoTensor mean_video = constant_video(iv.video.extent(), dataset_mean);
        auto it = chosen.find(iv.label);
        std::vector<int> none;
        if (it == chosen.end() && k > 0)
            out.warnings.push_back("class " + std::to_string(iv.label) + " has no concepts; nothing selected");
        const auto& ids = it == chosen.end() ? none : it->second;
        const VideoTensor input = compose_for_eval(iv, mean_video, mode, ids);
        correct += net.predict(net.to_input(input)).label == iv.label;
    }
    std::sort(out.warnings.begin(), out.warnings.end());
    out.warnings.erase(std::unique(out.warnings.begin(), out.warnings.end()), out.warnings.end());
    out.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(videos.size());
    return out;
}

inline EvalOutcome eval_add(const ModelBackend& net, std::span<const IndexedVideo> videos,
                            const std::map<int, ImportanceReport>& reports, std::span<const float> dataset_mean,
                            Selection selection, std::size_t k, std::uint64_t seed) {
    return eval_concepts(net, videos, reports, dataset_mean, EvalMode::Add, selection, k, seed);
}

inline EvalOutcome eval_remove(const ModelBackend& net, std::span<const IndexedVideo> videos,
                               const std::map<int, ImportanceReport>& reports, std::span<const float> dataset_mean,
                               Selection selection, std::size_t k, std::uint64_t seed) {
    return eval_concepts(net, videos, reports, dataset_mean, EvalMode::Remove, selection, k, seed);
}

/// Percent of test-split videos whose argmax equals the label.
inline double baseline_accuracy(const ModelBackend& net, const LabeledDataset& ds) {
    const auto test = ds.indices(Split::Test);
    detail::require(!test.empty(), "baseline_accuracy: empty test split");
    std::size_t correct = 0;
    for (auto i : test) correct += net.predict(net.to_input(ds.items[i].video)).label == ds.items[i].label;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Curves

struct EvalCurve {
    std::string model = "builtin";
    EvalMode mode = EvalMode::Add;
    Selection selection = Selection::Top;
    std::vector<double> accuracy;  // index k-1
    double baseline = 0.0;
    std::uint64_t seed = 0;
};

inline std::string format_percent(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << v;
    return os.str();
}

/// CSV rows `model,mode,selection,k,accuracy,baseline,seed`, with header.
inline std::string curves_to_csv(std::span<const EvalCurve> curves) {
    std::ostringstream os;
    os << "model,mode,selection,k,accuracy,baseline,seed\n";
    for (const auto& c : curves)
        for (std::size_t k = 0; k < c.accuracy.size(); ++k)
            os << c.model << ',' << to_string(c.mode) << ',' << to_string(c.selection) << ',' << k + 1 << ','
               << format_percent(c.accuracy[k]) << ',' << format_percent(c.baseline) << ',' << c.seed << '\n';
    return os.str();
}

inline std::vector<EvalCurve> curves_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "model,mode,selection,k,accuracy,baseline,seed")
        throw ParseError(ParseError::Kind::Syntax, "curve CSV: unexpected header");
    std::vector<EvalCurve> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 7) throw ParseError(ParseError::Kind::Syntax, "curve CSV: expected 7 fields");
        const EvalMode mode = f[1] == "add" ? EvalMode::Add : EvalMode::Remove;
        const Selection sel = f[2] == "top" ? Selection::Top : f[2] == "least" ? Selection::Least : Selection::Random;
        const auto k = std::stoul(f[3]);
        if (out.empty() || out.back().mode != mode || out.back().selection != sel || out.back().model != f[0] ||
            out.back().accuracy.size() + 1 != k)
            out.push_back({f[0], mode, sel, {}, std::stod(f[5]), std::stoull(f[6])});
        out.back().accuracy.push_back(std::stod(f[4]));
    }
    return out;
}

}  // namespace stace
