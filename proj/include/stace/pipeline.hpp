#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stace/cav.hpp"
#include "stace/concepts.hpp"
#include "stace/convnet.hpp"
#include "stace/dataset.hpp"
#include "stace/evalharness.hpp"
#include "stace/scoring.hpp"
#include "stace/supervoxel.hpp"

// In-memory glue between the modules. The CLI persists each step to disk; the
// acceptance harness calls these directly.

namespace stace {

enum class NegativeSource { Segments, Whole };

inline NegativeSource negative_source_from_string(const std::string& s) {
    if (s == "segments") return NegativeSource::Segments;
    if (s == "whole") return NegativeSource::Whole;
    throw InvalidArgument("negatives must be 'whole' or 'segments', got '" + s + "'");
}

inline const char* to_string(NegativeSource n) { return n == NegativeSource::Whole ? "whole" : "segments"; }

struct PipelineOptions {
    // segmentation
    LevelCounts counts;
    double compactness = 0.3;
    std::size_t slic_iters = 10;
    // 0.95 keeps only ~10% of segments on synthetic clips: neighbouring
    // descriptors are all-positive and nearly parallel
    double tau = 0.995;
    // concepts
    std::string layer = "gap";
    std::size_t n_concepts = 10;
    std::size_t kmeans_iters = 100;
    std::size_t kmeans_restarts = 10;
    std::size_t min_size = 5;
    std::size_t min_videos = 2;
    // cav
    CavOptions cav;
    NegativeSource negatives = NegativeSource::Segments;
    std::size_t n_negatives = 0;  // 0: as many as positives
    // scoring / eval
    std::size_t score_k = 0;  // 0: whole test split of the class
    std::size_t k_max = 5;
};

/// Per-(stage, class) seed.
inline std::uint64_t class_seed(std::uint64_t stage_seed, int y) {
    return stage_seed * 1000003ULL + static_cast<std::uint64_t>(y);
}

// ---------------------------------------------------------------------------
// Segmentation

struct VideoSegments {
    std::string video_id;
    SegmentationLevels levels;
    std::vector<Segment> segments;  // surviving, in extraction order
};

inline VideoSegments segment_video(const std::string& id, const VideoTensor& video, const PipelineOptions& opt,
                                   std::uint64_t seed) {
    VideoSegments vs{id, multilevel_segment(video, opt.counts, opt.compactness, seed, opt.slic_iters), {}};
    vs.segments = dedupe_segments(extract_segments(id, video, vs.levels), opt.tau);
    return vs;
}

/// Rebuilds the surviving segments of a video from its label volumes.
inline std::vector<Segment> surviving_segments(const std::string& id, const VideoTensor& video,
                                               const SegmentationLevels& levels, std::span<const SegmentRef> keep) {
    const std::set<SegmentRef> wanted(keep.begin(), keep.end());
    std::vector<Segment> out;
    for (auto& s : extract_segments(id, video, levels))
        if (wanted.count(ref_of(s))) out.push_back(std::move(s));
    detail::require(out.size() == wanted.size(), "segment list of video '" + id + "' does not match its label volumes");
    return out;
}

// ---------------------------------------------------------------------------
// Featurized segment pool

struct SegmentTable {
    std::vector<SegmentRef> refs;
    std::vector<int> labels;         // class of the source video
    std::vector<Split> splits;       // split of the source video
    std::vector<std::size_t> items;  // dataset item index
    FeatureMatrix features;

    std::vector<std::size_t> rows(Split s, int y) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < refs.size(); ++i)
            if (splits[i] == s && labels[i] == y) out.push_back(i);
        return out;
    }
};

/// `segments[i]` belongs to `ds.items[i]`.
inline SegmentTable featurize_segments(const ModelBackend& net, const LabeledDataset& ds,
                                       std::span<const std::vector<Segment>> segments, std::string_view layer) {
    detail::require(segments.size() == ds.items.size(), "featurize_segments: one segment list per video expected");
    const auto mean = dataset_mean(ds);
    SegmentTable t;
    t.features = FeatureMatrix(0, net.layer_size(layer));
    for (std::size_t i = 0; i < ds.items.size(); ++i)
        for (const auto& s : segments[i]) {
            const auto in = segment_to_input(ds.items[i].video, s, mean, net.input_extent());
            t.refs.push_back(ref_of(s));
            t.labels.push_back(ds.items[i].label);
            t.splits.push_back(ds.items[i].split);
            t.items.push_back(i);
            t.features.push_row(net.activations(in.tensor, layer));
        }
    return t;
}

// ---------------------------------------------------------------------------
// Concepts, CAVs, scores

/// Clusters the train-split segments of class y.
inline std::vector<Concept> discover_concepts(const SegmentTable& t, int y, const PipelineOptions& opt, std::uint64_t seed) {
    const auto rows = t.rows(Split::Train, y);
    detail::require(rows.size() >= opt.n_concepts, "class " + std::to_string(y) + " has " + std::to_string(rows.size()) +
                                                       " train segments, fewer than C=" + std::to_string(opt.n_concepts));
    const FeatureMatrix x = t.features.select(rows);
    const auto km = kmeans_best(x, opt.n_concepts, opt.kmeans_iters, seed, opt.kmeans_restarts);
    std::vector<SegmentRef> refs;
    for (auto r : rows) refs.push_back(t.refs[r]);
    return build_concepts(y, refs, km.assignments, km.centroids, opt.min_size, opt.min_videos);
}

/// Feature rows of a concept's members, in member order.
inline FeatureMatrix member_features(const SegmentTable& t, const Concept& c) {
    std::map<SegmentRef, std::size_t> row_of;
    for (std::size_t i = 0; i < t.refs.size(); ++i) row_of.emplace(t.refs[i], i);
    std::vector<std::size_t> rows;
    for (const auto& m : c.members) {
        auto it = row_of.find(m);
        detail::require(it != row_of.end(), "concept member not found among featurized segments");
        rows.push_back(it->second);
    }
    return t.features.select(rows);
}

/// Every train video, featurized, with its class in `classes`. Used when
/// negatives are whole videos rather than segments.
inline FeatureMatrix whole_video_features(const ModelBackend& net, const LabeledDataset& ds, std::string_view layer,
                                          std::vector<int>* classes) {
    FeatureMatrix out(0, net.layer_size(layer));
    for (auto i : ds.indices(Split::Train)) {
        out.push_row(net.activations(net.to_input(ds.items[i].video), layer));
        classes->push_back(ds.items[i].label);
    }
    return out;
}

struct CavRun {
    std::vector<Cav> cavs;
    std::vector<std::string> warnings;
};

/// One CAV per concept. Negatives are train-split segments (or whole videos)
/// of other classes; degenerate CAVs are skipped with a warning.
inline CavRun learn_cavs(const ModelBackend& net, const LabeledDataset& ds, const SegmentTable& t,
                         std::span<const Concept> concepts, const PipelineOptions& opt, std::uint64_t stage_seed) {
    CavRun run;
    FeatureMatrix whole;
    std::vector<int> whole_classes;
    if (opt.negatives == NegativeSource::Whole) whole = whole_video_features(net, ds, opt.layer, &whole_classes);

    std::vector<std::size_t> train_rows;
    std::vector<int> train_classes;
    for (std::size_t i = 0; i < t.refs.size(); ++i)
        if (t.splits[i] == Split::Train) train_rows.push_back(i), train_classes.push_back(t.labels[i]);
    const FeatureMatrix train_features = t.features.select(train_rows);

    for (const auto& c : concepts) {
        const FeatureMatrix pos = member_features(t, c);
        const FeatureMatrix& pool = opt.negatives == NegativeSource::Whole ? whole : train_features;
        const std::vector<int>& pool_classes = opt.negatives == NegativeSource::Whole ? whole_classes : train_classes;
        const std::size_t available = static_cast<std::size_t>(
            std::count_if(pool_classes.begin(), pool_classes.end(), [&](int k) { return k != c.class_label; }));
        std::size_t n = opt.n_negatives ? opt.n_negatives : pos.rows;
        if (n > available && opt.n_negatives == 0) n = available;
        const std::uint64_t seed = class_seed(stage_seed, c.class_label) * 131 + static_cast<std::uint64_t>(c.id);
        const FeatureMatrix neg = sample_negatives(pool, pool_classes, c.class_label, n, seed);
        CavOptions co = opt.cav;
        co.seed = seed;
        try {
            Cav cav = train_cav(pos, neg, co);
            cav.class_label = c.class_label;
            cav.concept_id = c.id;
            cav.layer = opt.layer;
            run.cavs.push_back(std::move(cav));
        } catch (const DegenerateCav& e) {
            run.warnings.push_back("class " + std::to_string(c.class_label) + " concept " + std::to_string(c.id) +
                                   ": " + e.what());
        }
    }
    return run;
}

/// The first K test videos of class y (all when K is 0), at model input dims.
inline std::vector<VideoTensor> scoring_videos(const ModelBackend& net, const LabeledDataset& ds, int y, std::size_t k) {
    auto idx = ds.indices(Split::Test, y);
    if (k && k < idx.size()) idx.resize(k);
    std::vector<VideoTensor> out;
    for (auto i : idx) out.push_back(net.to_input(ds.items[i].video));
    return out;
}

inline std::vector<Cav> cavs_of_class(std::span<const Cav> cavs, int y) {
    std::vector<Cav> out;
    for (const auto& c : cavs)
        if (c.class_label == y) out.push_back(c);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Test videos with their segments mapped onto their class's concepts. Classes
/// without concepts are skipped.
inline std::vector<IndexedVideo> index_test_videos(const LabeledDataset& ds, const SegmentTable& t,
                                                   std::span<const std::vector<Segment>> segments,
                                                   std::span<const Concept> concepts) {
    std::vector<IndexedVideo> out;
    for (auto i : ds.indices(Split::Test)) {
        const auto& item = ds.items[i];
        std::vector<Concept> own;
        for (const auto& c : concepts)
            if (c.class_label == item.label) own.push_back(c);
        IndexedVideo iv{item.id, item.label, item.video, {}, {}};
        if (!own.empty()) {
            std::vector<std::size_t> rows;
            for (std::size_t r = 0; r < t.refs.size(); ++r)
                if (t.items[r] == i) rows.push_back(r);
            detail::require(rows.size() == segments[i].size(), "segment table out of sync with video " + item.id);
            iv.concept_of = nearest_concepts(t.features.select(rows), own);
            for (const auto& s : segments[i]) iv.masks.push_back(s.mask);
        }
        out.push_back(std::move(iv));
    }
    return out;
}

struct EvalRun {
    std::vector<EvalCurve> curves;
    double baseline = 0.0;
    double remove_k0 = 0.0;
    double add_k0 = 0.0;
    std::vector<std::string> warnings;
};

inline EvalRun evaluate(const ModelBackend& net, const LabeledDataset& ds, std::span<const IndexedVideo> videos,
                        const std::map<int, ImportanceReport>& reports, std::size_t k_max, std::uint64_t seed,
                        const std::string& model_id = "builtin") {
    const auto mean = dataset_mean(ds);
    EvalRun run;
    run.baseline = baseline_accuracy(net, ds);
    run.remove_k0 = eval_remove(net, videos, reports, mean, Selection::Top, 0, seed).accuracy;
    run.add_k0 = eval_add(net, videos, reports, mean, Selection::Top, 0, seed).accuracy;
    for (EvalMode mode : {EvalMode::Add, EvalMode::Remove})
        for (Selection sel : {Selection::Top, Selection::Random, Selection::Least}) {
            EvalCurve c{model_id, mode, sel, {}, run.baseline, seed};
            for (std::size_t k = 1; k <= k_max; ++k) {
                auto o = eval_concepts(net, videos, reports, mean, mode, sel, k, seed);
                c.accuracy.push_back(o.accuracy);
                run.warnings.insert(run.warnings.end(), o.warnings.begin(), o.warnings.end());
            }
            run.curves.push_back(std::move(c));
        }
    std::sort(run.warnings.begin(), run.warnings.end());
    run.warnings.erase(std::unique(run.warnings.begin(), run.warnings.end()), run.warnings.end());
    return run;
}

}  // namespace stace
