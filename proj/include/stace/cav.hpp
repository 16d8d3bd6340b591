#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stace/concepts.hpp"
#include "stace/error.hpp"

namespace stace {

/// Concept activation vector: unit normal of a linear boundary between a
/// concept's activations (positive side) and random activations.
struct Cav {
    int class_label = 0;
    int concept_id = 0;
    std::string layer = "gap";
    std::vector<float> direction;
    double heldout_accuracy = 0.0;
    double train_accuracy = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
};

struct CavOptions {
    double l2 = 1e-3;
    std::size_t epochs = 500;
    double lr = 0.1;
    std::uint64_t seed = 0;
};

struct LinearModel {
    std::vector<double> w;
    double b = 0.0;

    double score(std::span<const float> x) const {
        double s = b;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
        return s;
    }
};

namespace detail {

/// Full-batch gradient descent on mean logistic loss + (l2/2)|w|^2; the bias is unregularized.
inline LinearModel fit_logistic(const FeatureMatrix& x, std::span<const int> y, const CavOptions& opt) {
    const std::size_t n = x.rows, d = x.cols;
    LinearModel m{std::vector<double>(d, 0.0), 0.0};
    std::vector<double> gw(d);
    for (std::size_t step = 0; step < opt.epochs; ++step) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double yi = y[i] > 0 ? 1.0 : -1.0;
            const double z = yi * m.score(x.row(i));
            // d/dz log(1 + e^{-z}) = -sigmoid(-z)
            const double coef = -yi / (1.0 + std::exp(z));
            for (std::size_t j = 0; j < d; ++j) gw[j] += coef * x.row(i)[j];
            gb += coef;
        }
        for (std::size_t j = 0; j < d; ++j) m.w[j] -= opt.lr * (gw[j] / static_cast<double>(n) + opt.l2 * m.w[j]);
        m.b -= opt.lr * gb / static_cast<double>(n);
    }
    return m;
}

inline double accuracy(const LinearModel& m, const FeatureMatrix& x, std::span<const int> y) {
    if (x.rows == 0) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < x.rows; ++i) ok += (m.score(x.row(i)) > 0.0) == (y[i] > 0);
    return static_cast<double>(ok) / static_cast<double>(x.rows);
}

inline bool same_row_sets(const FeatureMatrix& a, const FeatureMatrix& b) {
    auto rows = [](const FeatureMatrix& m) {
        std::vector<std::vector<float>> r;
        for (std::size_t i = 0; i < m.rows; ++i) r.emplace_back(m.row(i).begin(), m.row(i).end());
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
        return r;
    };
    return rows(a) == rows(b);
}

}  // namespace detail

/// Logistic-regression CAV with a stratified, seeded 80/20 train/held-out split.
/// Throws DegenerateCav when positives and negatives are indistinguishable.
inline Cav train_cav(const FeatureMatrix& positives, const FeatureMatrix& negatives, const CavOptions& opt = {}) {
    detail::require(positives.rows >= 4 && negatives.rows >= 4, "train_cav: need at least 4 positives and 4 negatives");
    detail::require(positives.cols == negatives.cols, "train_cav: feature width mismatch");
    if (detail::same_row_sets(positives, negatives))
        throw DegenerateCav("degenerate CAV: positive and negative features are identical");

    std::mt19937_64 rng(opt.seed);
    FeatureMatrix train_x(0, positives.cols), held_x(0, positives.cols);
    std::vector<int> train_y, held_y;
    for (const auto* side : {&positives, &negatives}) {
        const int label = side == &positives ? 1 : 0;
        std::vector<std::size_t> order(side->rows);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_held = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(side->rows))));
        for (std::size_t k = 0; k < order.size(); ++k) {
            auto& x = k < n_held ? held_x : train_x;
            auto& y = k < n_held ? held_y : train_y;
            x.push_row(side->row(order[k]));
            y.push_back(label);
        }
    }

    const LinearModel m = detail::fit_logistic(train_x, train_y, opt);
    double norm = 0.0;
    for (double v : m.w) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm >= 1e-12)) throw DegenerateCav("degenerate CAV: classifier weight norm below 1e-12");

    Cav cav;
    cav.direction.resize(m.w.size());
    for (std::size_t i = 0; i < m.w.size(); ++i) cav.direction[i] = static_cast<float>(m.w[i] / norm);
    cav.heldout_accuracy = detail::accuracy(m, held_x, held_y);
    cav.train_accuracy = detail::accuracy(m, train_x, train_y);
    cav.n_pos = positives.rows;
    cav.n_neg = negatives.rows;
    return cav;
}

/// Seeded uniform sample (without replacement) of `n` indices from `pool`,
/// in shuffled order.
inline std::vector<std::size_t> sample_indices(std::vector<std::size_t> pool, std::size_t n, std::uint64_t seed) {
    detail::require(n <= pool.size(), "sample_negatives: need " + std::to_string(n) + " negatives but pool has " +
                                          std::to_string(pool.size()));
    std::mt19937_64 rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(n);
    return pool;
}

/// Draws `n` segments whose class differs from `y` and returns their
/// features. `features` holds one precomputed row per entry of `classes`.
inline FeatureMatrix sample_negatives(const FeatureMatrix& features, std::span<const int> classes, int y, std::size_t n,
                                      std::uint64_t seed, std::vector<std::size_t>* chosen = nullptr) {
    detail::require(features.rows == classes.size(), "sample_negatives: features/classes length mismatch");
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] != y) pool.push_back(i);
    auto idx = sample_indices(std::move(pool), n, seed);
    if (chosen) *chosen = idx;
    return features.select(idx);
}

/// Seeded isotropic Gaussian directions normalized to unit length.
inline std::vector<std::vector<float>> random_cavs(std::size_t dim, std::size_t count, std::uint64_t seed) {
    detail::require(dim >= 1, "random_cavs: dim must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<float>> out;
    out.reserve(count);
    while (out.size() < count) {
        std::vector<double> v(dim);
        double norm = 0.0;
        for (auto& x : v) norm += (x = g(rng)) * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        std::vector<float> u(dim);
        for (std::size_t i = 0; i < dim; ++i) u[i] = static_cast<float>(v[i] / norm);
        out.push_back(std::move(u));
    }
    return out;
}

// CAV store JSON: [{class, concept, layer, accuracy, train_accuracy, n_pos, n_neg, vector}]

inline nlohmann::json cavs_to_json(std::span<const Cav> cavs) {
    auto arr = nlohmann::json::array();
    for (const auto& c : cavs)
        arr.push_back({{"class", c.class_label},
                       {"concept", c.concept_id},
                       {"layer", c.layer},
                       {"accuracy", c.heldout_accuracy},
                       {"train_accuracy", c.train_accuracy},
                       {"n_pos", c.n_pos},
                       {"n_neg", c.n_neg},
                       {"vector", c.direction}});
    return arr;
}

inline std::vector<Cav> cavs_from_json(const nlohmann::json& j) {
    std::vector<Cav> out;
    for (const auto& e : j) {
        Cav c;
        c.class_label = e.at("class").get<int>();
        c.concept_id = e.at("concept").get<int>();
        c.layer = e.at("layer").get<std::string>();
        c.heldout_accuracy = e.at("accuracy").get<double>();
        c.train_accuracy = e.value("train_accuracy", 0.0);
        c.n_pos = e.at("n_pos").get<std::size_t>();
        c.n_neg = e.at("n_neg").get<std::size_t>();
        c.direction = e.at("vector").get<std::vector<float>>();
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace stace
