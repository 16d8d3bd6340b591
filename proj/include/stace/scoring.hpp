#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stace/cav.hpp"
#include "stace/convnet.hpp"
#include "stace/error.hpp"

namespace stace {

/// Importance of every concept of one class at one layer.
struct ImportanceReport {
    struct Entry {
        int concept_id = 0;
        std::vector<double> influence;  // I per evaluation video
        double score = 0.0;             // S: fraction of strictly positive I
        double cav_accuracy = 0.0;
    };

    int class_label = 0;
    std::string layer = "gap";
    std::size_t k = 0;
    std::vector<Entry> concepts;
    std::vector<int> ranking;

    const Entry& entry(int concept_id) const {
        for (const auto& e : concepts)
            if (e.concept_id == concept_id) return e;
        throw InvalidArgument("report has no concept " + std::to_string(concept_id));
    }
};

inline double dot(std::span<const float> a, std::span<const float> b) {
    detail::require(a.size() == b.size(), "dimension mismatch between gradient and CAV");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

/// I = grad_l p_y(f_l(v)) . v_c : the rate of change of logit y when the layer
/// activations move along the CAV.
inline double directional_derivative(const ModelBackend& net, const VideoTensor& video, int y, std::string_view layer,
                                     const Cav& cav) {
    detail::require(cav.layer == layer, "CAV layer '" + cav.layer + "' differs from scoring layer '" + std::string(layer) + "'");
    const double i = dot(net.grad_logit_wrt_activations(video, y, layer), cav.direction);
    detail::require(std::isfinite(i), "non-finite directional derivative");
    return i;
}

/// Concept ids by descending S; ties by ascending id.
inline std::vector<int> rank_concepts(const ImportanceReport& report) {
    std::vector<const ImportanceReport::Entry*> es;
    for (const auto& e : report.concepts) es.push_back(&e);
    std::stable_sort(es.begin(), es.end(), [](const auto* a, const auto* b) {
        if (a->score != b->score) return a->score > b->score;
        return a->concept_id < b->concept_id;
    });
    std::vector<int> out;
    for (const auto* e : es) out.push_back(e->concept_id);
    return out;
}

/// S = |{n : I_n > 0}| / K.
inline double positive_fraction(std::span<const double> influence) {
    detail::require(!influence.empty(), "positive_fraction: K must be >= 1");
    const auto pos = std::count_if(influence.begin(), influence.end(), [](double v) { return v > 0.0; });
    return static_cast<double>(pos) / static_cast<double>(influence.size());
}

/// Scores from precomputed layer gradients (one per evaluation video), so
/// offline backends can be scored without a live model.
inline ImportanceReport tcav_scores_from_gradients(std::span<const std::vector<float>> gradients, std::span<const Cav> cavs,
                                                   int y, std::string_view layer) {
    detail::require(!gradients.empty(), "tcav_scores: K must be >= 1");
    detail::require(!cavs.empty(), "tcav_scores: empty CAV list");
    ImportanceReport r;
    r.class_label = y;
    r.layer = std::string(layer);
    r.k = gradients.size();
    for (const auto& cav : cavs) {
        detail::require(cav.layer == layer, "CAV layer '" + cav.layer + "' differs from scoring layer");
        ImportanceReport::Entry e;
        e.concept_id = cav.concept_id;
        e.cav_accuracy = cav.heldout_accuracy;
        for (const auto& g : gradients) e.influence.push_back(dot(g, cav.direction));
        e.score = positive_fraction(e.influence);
        r.concepts.push_back(std::move(e));
    }
    r.ranking = rank_concepts(r);
    return r;
}

inline ImportanceReport tcav_scores(const ModelBackend& net, std::span<const VideoTensor> videos, std::span<const Cav> cavs,
                                    int y, std::string_view layer) {
    detail::require(!videos.empty(), "tcav_scores: K must be >= 1");
    detail::require(!cavs.empty(), "tcav_scores: empty CAV list");
    std::vector<std::vector<float>> grads;
    grads.reserve(videos.size());
    for (const auto& v : videos) grads.push_back(net.grad_logit_wrt_activations(v, y, layer));
    return tcav_scores_from_gradients(grads, cavs, y, layer);
}

// Report JSON: {class, layer, K, concepts: [{id, S, I: [...], cav_accuracy}], ranking: [...]}

inline nlohmann::json report_to_json(const ImportanceReport& r) {
    auto cs = nlohmann::json::array();
    for (const auto& e : r.concepts)
        cs.push_back({{"id", e.concept_id}, {"S", e.score}, {"I", e.influence}, {"cav_accuracy", e.cav_accuracy}});
    return {{"class", r.class_label}, {"layer", r.layer}, {"K", r.k}, {"concepts", std::move(cs)}, {"ranking", r.ranking}};
}

inline ImportanceReport report_from_json(const nlohmann::json& j) {
    ImportanceReport r;
    r.class_label = j.at("class").get<int>();
    r.layer = j.at("layer").get<std::string>();
    r.k = j.at("K").get<std::size_t>();
    for (const auto& e : j.at("concepts")) {
        ImportanceReport::Entry en;
        en.concept_id = e.at("id").get<int>();
        en.score = e.at("S").get<double>();
        en.influence = e.at("I").get<std::vector<double>>();
        en.cav_accuracy = e.value("cav_accuracy", 0.0);
        r.concepts.push_back(std::move(en));
    }
    r.ranking = j.at("ranking").get<std::vector<int>>();
    return r;
}

}  // namespace stace
