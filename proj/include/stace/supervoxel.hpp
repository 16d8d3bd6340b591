#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "stace/binary_io.hpp"
#include "stace/error.hpp"
#include "stace/tensor.hpp"

namespace stace {

/// Per-voxel segment labels, compacted to [0, n_segments).
struct LabelVolume {
    Extent extent;
    std::vector<std::uint32_t> labels;
    std::uint32_t n_segments = 0;

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

enum class Level : std::uint8_t { Small = 0, Middle = 1, Large = 2 };
inline constexpr std::array kLevels{Level::Small, Level::Middle, Level::Large};

inline const char* to_string(Level l) {
    switch (l) {
        case Level::Small: return "small";
        case Level::Middle: return "middle";
        case Level::Large: return "large";
    }
    return "?";
}

inline Level level_from_string(const std::string& s) {
    if (s == "small") return Level::Small;
    if (s == "middle") return Level::Middle;
    if (s == "large") return Level::Large;
    throw ParseError(ParseError::Kind::Syntax, "unknown segmentation level '" + s + "'");
}

struct SegmentationLevels {
    LabelVolume small, middle, large;

    const LabelVolume& at(Level l) const {
        switch (l) {
            case Level::Small: return small;
            case Level::Middle: return middle;
            default: return large;
        }
    }
};

/// Descriptor layout: mean color (3, zero-padded), centroid t/h/w in (0,1), relative volume.
using Descriptor = std::array<float, 7>;

struct Segment {
    std::string video_id;
    Level level = Level::Small;
    std::uint32_t label_id = 0;
    VoxelMask mask;
    Box bbox;
    Descriptor descriptor{};

    std::size_t volume() const { return mask.count(); }
};

/// Identifies a segment without carrying its mask.
struct SegmentRef {
    std::string video_id;
    Level level = Level::Small;
    std::uint32_t label_id = 0;

    friend auto operator<=>(const SegmentRef&, const SegmentRef&) = default;
};

inline SegmentRef ref_of(const Segment& s) { return {s.video_id, s.level, s.label_id}; }

// ---------------------------------------------------------------------------
// 3-D SLIC

struct SlicResult {
    LabelVolume labels;
    /// Objective after initialization, then after each completed iteration.
    std::vector<double> objective;
    std::size_t iterations = 0;
};

/// Grid of initial centers per axis. Picks the (nt,nh,nw) with product <= n
/// whose spacings are closest to the isotropic step S, penalizing unused seeds.
inline std::array<std::size_t, 3> slic_grid(Extent e, std::size_t n) {
    const double step = std::cbrt(static_cast<double>(e.voxels()) / static_cast<double>(n));
    std::array<std::size_t, 3> best{1, 1, 1};
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t nt = 1; nt <= std::min(e.t, n); ++nt)
        for (std::size_t nh = 1; nh <= std::min(e.h, n / nt); ++nh)
            for (std::size_t nw = 1; nw <= std::min(e.w, n / (nt * nh)); ++nw) {
                auto sq = [&](std::size_t dim, std::size_t cnt) {
                    const double r = std::log(static_cast<double>(dim) / static_cast<double>(cnt) / step);
                    return r * r;
                };
                const double cost = sq(e.t, nt) + sq(e.h, nh) + sq(e.w, nw) +
                                    2.0 * std::log(static_cast<double>(n) / static_cast<double>(nt * nh * nw));
                if (cost < best_cost - 1e-12) {
                    best_cost = cost;
                    best = {nt, nh, nw};
                }
            }
    return best;
}

/// Position of grid center `i` of `n` along an axis of length `dim`.
inline double grid_center(std::size_t i, std::size_t n, std::size_t dim) {
    return (static_cast<double>(i) + 0.5) * static_cast<double>(dim) / static_cast<double>(n) - 0.5;
}

inline std::size_t nearest_grid_cell(std::size_t coord, std::size_t n, std::size_t dim) {
    const auto i = static_cast<std::size_t>(std::floor((static_cast<double>(coord) + 0.5) * static_cast<double>(n) /
                                                       static_cast<double>(dim)));
    return std::min(i, n - 1);
}

inline LabelVolume compact_labels(Extent extent, const std::vector<std::uint32_t>& raw) {
    LabelVolume out{extent, std::vector<std::uint32_t>(raw.size()), 0};
    std::vector<std::uint32_t> remap;
    for (std::size_t v = 0; v < raw.size(); ++v) {
        const auto r = raw[v];
        if (r >= remap.size()) remap.resize(r + 1, std::numeric_limits<std::uint32_t>::max());
        if (remap[r] == std::numeric_limits<std::uint32_t>::max()) remap[r] = out.n_segments++;
        out.labels[v] = remap[r];
    }
    return out;
}

/// Localized k-means over (color, compactness-scaled position). The seed is
/// accepted for interface stability; initialization is a deterministic grid.
inline SlicResult slic3d_detailed(const VideoTensor& video, std::size_t n_segments, double compactness,
                                  std::size_t max_iters, std::uint64_t /*seed*/ = 0) {
    const Extent e = video.extent();
    const std::size_t V = e.voxels();
    detail::require(n_segments >= 1, "slic3d: n_segments must be >= 1");
    detail::require(n_segments <= V, "slic3d: n_segments exceeds voxel count");
    detail::require(compactness > 0.0, "slic3d: compactness must be > 0");
    detail::require(max_iters >= 1, "slic3d: max_iters must be >= 1");

    const std::size_t C = video.channels();
    const std::size_t stride = C + 3;
    const double step = std::cbrt(static_cast<double>(V) / static_cast<double>(n_segments));
    const double spatial_w = (compactness / step) * (compactness / step);
    const auto grid = slic_grid(e, n_segments);
    const std::size_t K = grid[0] * grid[1] * grid[2];
    auto x = video.data();

    std::vector<double> centers(K * stride);
    std::vector<std::uint32_t> labels(V);
    {
        std::size_t k = 0;
        for (std::size_t i = 0; i < grid[0]; ++i)
            for (std::size_t j = 0; j < grid[1]; ++j)
                for (std::size_t l = 0; l < grid[2]; ++l, ++k) {
                    double* c = &centers[k * stride];
                    c[C] = grid_center(i, grid[0], e.t);
                    c[C + 1] = grid_center(j, grid[1], e.h);
                    c[C + 2] = grid_center(l, grid[2], e.w);
                    const auto vt = std::min(static_cast<std::size_t>(std::lround(std::max(0.0, c[C]))), e.t - 1);
                    const auto vh = std::min(static_cast<std::size_t>(std::lround(std::max(0.0, c[C + 1]))), e.h - 1);
                    const auto vw = std::min(static_cast<std::size_t>(std::lround(std::max(0.0, c[C + 2]))), e.w - 1);
                    for (std::size_t ch = 0; ch < C; ++ch) c[ch] = video.at(vt, vh, vw, ch);
                }
        std::size_t v = 0;
        for (std::size_t t = 0; t < e.t; ++t)
            for (std::size_t h = 0; h < e.h; ++h)
                for (std::size_t w = 0; w < e.w; ++w, ++v) {
                    const auto ct = nearest_grid_cell(t, grid[0], e.t);
                    const auto chh = nearest_grid_cell(h, grid[1], e.h);
                    const auto cw = nearest_grid_cell(w, grid[2], e.w);
                    labels[v] = static_cast<std::uint32_t>((ct * grid[1] + chh) * grid[2] + cw);
                }
    }

    auto distance = [&](std::size_t v, std::size_t t, std::size_t h, std::size_t w, const double* c) {
        double dc = 0.0;
        for (std::size_t ch = 0; ch < C; ++ch) {
            const double d = static_cast<double>(x[v * C + ch]) - c[ch];
            dc += d * d;
        }
        const double dt = static_cast<double>(t) - c[C];
        const double dh = static_cast<double>(h) - c[C + 1];
        const double dw = static_cast<double>(w) - c[C + 2];
        return dc + spatial_w * (dt * dt + dh * dh + dw * dw);
    };

    std::vector<double> dist(V);
    auto assigned_distances = [&] {
        double total = 0.0;
        std::size_t v = 0;
        for (std::size_t t = 0; t < e.t; ++t)
            for (std::size_t h = 0; h < e.h; ++h)
                for (std::size_t w = 0; w < e.w; ++w, ++v) {
                    dist[v] = distance(v, t, h, w, &centers[labels[v] * stride]);
                    total += dist[v];
                }
        return total;
    };

    SlicResult result;
    result.objective.push_back(assigned_distances());

    std::vector<double> sums(K * stride);
    std::vector<std::size_t> counts(K);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Assignment: a voxel moves only to a strictly closer center within its window,
        // so its distance never grows even if its current center left the window.
        bool changed = false;
        for (std::size_t k = 0; k < K; ++k) {
            const double* c = &centers[k * stride];
            auto range = [&](double p, std::size_t dim) {
                const double lo = std::max(0.0, std::ceil(p - step));
                const double hi = std::min(static_cast<double>(dim) - 1.0, std::floor(p + step));
                return std::pair{static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
            };
            const auto [t0, t1] = range(c[C], e.t);
            const auto [h0, h1] = range(c[C + 1], e.h);
            const auto [w0, w1] = range(c[C + 2], e.w);
            for (std::size_t t = t0; t <= t1; ++t)
                for (std::size_t h = h0; h <= h1; ++h)
                    for (std::size_t w = w0; w <= w1; ++w) {
                        const std::size_t v = (t * e.h + h) * e.w + w;
                        const double d = distance(v, t, h, w, c);
                        if (d < dist[v]) {
                            dist[v] = d;
                            if (labels[v] != k) {
                                labels[v] = static_cast<std::uint32_t>(k);
                                changed = true;
                            }
                        }
                    }
        }
        if (!changed) break;

        // Update: centers move to their members' mean; empty centers stay put.
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        std::size_t v = 0;
        for (std::size_t t = 0; t < e.t; ++t)
            for (std::size_t h = 0; h < e.h; ++h)
                for (std::size_t w = 0; w < e.w; ++w, ++v) {
                    double* s = &sums[labels[v] * stride];
                    for (std::size_t ch = 0; ch < C; ++ch) s[ch] += x[v * C + ch];
                    s[C] += static_cast<double>(t);
                    s[C + 1] += static_cast<double>(h);
                    s[C + 2] += static_cast<double>(w);
                    ++counts[labels[v]];
                }
        for (std::size_t k = 0; k < K; ++k) {
            if (counts[k] == 0) continue;
            for (std::size_t d = 0; d < stride; ++d)
                centers[k * stride + d] = sums[k * stride + d] / static_cast<double>(counts[k]);
        }
        result.objective.push_back(assigned_distances());
        result.iterations = iter + 1;
    }

    result.labels = compact_labels(e, labels);
    return result;
}

inline LabelVolume slic3d(const VideoTensor& video, std::size_t n_segments, double compactness, std::size_t max_iters,
                          std::uint64_t seed = 0) {
    return slic3d_detailed(video, n_segments, compactness, max_iters, seed).labels;
}

struct LevelCounts {
    std::size_t small = 64, middle = 16, large = 4;
};

inline SegmentationLevels multilevel_segment(const VideoTensor& video, LevelCounts counts, double compactness,
                                             std::uint64_t seed, std::size_t max_iters = 10) {
    detail::require(counts.small > counts.middle && counts.middle > counts.large && counts.large >= 1,
                    "multilevel_segment: counts must satisfy small > middle > large >= 1");
    return {slic3d(video, counts.small, compactness, max_iters, seed),
            slic3d(video, counts.middle, compactness, max_iters, seed + 1),
            slic3d(video, counts.large, compactness, max_iters, seed + 2)};
}

// ---------------------------------------------------------------------------
// Segments

inline std::vector<Segment> extract_segments(const std::string& video_id, const VideoTensor& video,
                                             const SegmentationLevels& levels) {
    const Extent e = video.extent();
    const std::size_t C = video.channels();
    std::vector<Segment> out;
    for (Level level : kLevels) {
        const auto& lv = levels.at(level);
        detail::require(lv.extent == e, "extract_segments: label volume extent does not match video");
        const std::size_t n = lv.n_segments;
        std::vector<Segment> segs(n);
        std::vector<std::array<double, 7>> acc(n, std::array<double, 7>{});
        std::vector<std::size_t> count(n, 0);
        for (std::size_t k = 0; k < n; ++k) {
            segs[k].video_id = video_id;
            segs[k].level = level;
            segs[k].label_id = static_cast<std::uint32_t>(k);
            segs[k].mask = VoxelMask(e);
            segs[k].bbox = {e.t, 0, e.h, 0, e.w, 0};
        }
        std::size_t v = 0;
        for (std::size_t t = 0; t < e.t; ++t)
            for (std::size_t h = 0; h < e.h; ++h)
                for (std::size_t w = 0; w < e.w; ++w, ++v) {
                    const auto k = lv.labels[v];
                    detail::require(k < n, "extract_segments: label out of range");
                    auto& s = segs[k];
                    s.mask.set(v);
                    auto& b = s.bbox;
                    b.t0 = std::min(b.t0, t), b.t1 = std::max(b.t1, t + 1);
                    b.h0 = std::min(b.h0, h), b.h1 = std::max(b.h1, h + 1);
                    b.w0 = std::min(b.w0, w), b.w1 = std::max(b.w1, w + 1);
                    auto& a = acc[k];
                    for (std::size_t ch = 0; ch < std::min<std::size_t>(C, 3); ++ch) a[ch] += video.at(t, h, w, ch);
                    a[3] += static_cast<double>(t);
                    a[4] += static_cast<double>(h);
                    a[5] += static_cast<double>(w);
                    ++count[k];
                }
        for (std::size_t k = 0; k < n; ++k) {
            detail::require(count[k] > 0, "extract_segments: label volume is not compacted");
            const double cnt = static_cast<double>(count[k]);
            auto& d = segs[k].descriptor;
            for (std::size_t ch = 0; ch < 3; ++ch) d[ch] = static_cast<float>(acc[k][ch] / cnt);
            d[3] = static_cast<float>((acc[k][3] / cnt + 0.5) / static_cast<double>(e.t));
            d[4] = static_cast<float>((acc[k][4] / cnt + 0.5) / static_cast<double>(e.h));
            d[5] = static_cast<float>((acc[k][5] / cnt + 0.5) / static_cast<double>(e.w));
            d[6] = static_cast<float>(cnt / static_cast<double>(e.voxels()));
        }
        for (auto& s : segs) out.push_back(std::move(s));
    }
    return out;
}

inline double cosine_similarity(const Descriptor& a, const Descriptor& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

/// Greedy near-duplicate removal within each video. Pairs are visited in
/// descending cosine similarity; for each pair above `tau` whose members are
/// both alive, the smaller segment is dropped (equal volume: higher label id,
/// then later input position). Survivors keep input order.
inline std::vector<Segment> dedupe_segments(std::vector<Segment> segments, double tau) {
    detail::require(tau > 0.0 && tau <= 1.0, "dedupe_segments: tau must be in (0, 1]");
    const std::size_t n = segments.size();
    std::vector<std::size_t> volume(n);
    for (std::size_t i = 0; i < n; ++i) volume[i] = segments[i].volume();

    std::map<std::string, std::vector<std::size_t>> by_video;
    for (std::size_t i = 0; i < n; ++i) by_video[segments[i].video_id].push_back(i);

    struct Pair {
        double sim;
        std::size_t i, j;
    };
    std::vector<Pair> pairs;
    for (const auto& [id, idx] : by_video)
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = a + 1; b < idx.size(); ++b) {
                const double s = cosine_similarity(segments[idx[a]].descriptor, segments[idx[b]].descriptor);
                if (s > tau) pairs.push_back({s, idx[a], idx[b]});
            }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) {
        return std::tie(y.sim, x.i, x.j) < std::tie(x.sim, y.i, y.j);
    });

    std::vector<bool> alive(n, true);
    for (const auto& p : pairs) {
        if (!alive[p.i] || !alive[p.j]) continue;
        // p.i precedes p.j in input order
        std::size_t drop = p.j;
        if (volume[p.i] != volume[p.j])
            drop = volume[p.i] < volume[p.j] ? p.i : p.j;
        else if (segments[p.i].label_id != segments[p.j].label_id)
            drop = segments[p.i].label_id > segments[p.j].label_id ? p.i : p.j;
        alive[drop] = false;
    }
    std::vector<Segment> out;
    for (std::size_t i = 0; i < n; ++i)
        if (alive[i]) out.push_back(std::move(segments[i]));
    return out;
}

// ---------------------------------------------------------------------------
// STL1: "STL1" | u32 T,H,W | u32 n_segments | u32 labels, little-endian.

inline std::vector<std::uint8_t> encode_stl1(const LabelVolume& lv) {
    std::vector<std::uint8_t> out;
    out.reserve(20 + 4 * lv.labels.size());
    binary::put_bytes(out, "STL1");
    for (auto d : {lv.extent.t, lv.extent.h, lv.extent.w}) binary::put_u32(out, static_cast<std::uint32_t>(d));
    binary::put_u32(out, lv.n_segments);
    for (auto l : lv.labels) binary::put_u32(out, l);
    return out;
}

inline LabelVolume decode_stl1(std::span<const std::uint8_t> bytes) {
    binary::Reader r(bytes);
    if (r.remaining() < 4) throw ParseError(ParseError::Kind::Truncated, "file shorter than magic");
    if (auto m = r.str(4); m != "STL1") throw ParseError(ParseError::Kind::BadMagic, "bad magic '" + m + "', expected 'STL1'");
    LabelVolume lv;
    std::uint64_t n = 1;
    std::size_t* dims[] = {&lv.extent.t, &lv.extent.h, &lv.extent.w};
    for (auto* d : dims) {
        *d = r.u32();
        if (*d == 0) throw ParseError(ParseError::Kind::Syntax, "zero dimension in header");
        n *= *d;
        if (n > detail::kMaxElements) throw ParseError(ParseError::Kind::DimOverflow, "dimensions overflow element limit");
    }
    lv.n_segments = r.u32();
    if (r.remaining() < 4 * n) throw ParseError(ParseError::Kind::Truncated, "truncated STL1 payload");
    if (r.remaining() > 4 * n) throw ParseError(ParseError::Kind::Syntax, "trailing bytes after STL1 payload");
    lv.labels.resize(n);
    for (auto& l : lv.labels) {
        l = r.u32();
        if (l >= lv.n_segments) throw ParseError(ParseError::Kind::Syntax, "label exceeds n_segments");
    }
    return lv;
}

inline void write_labels(const std::string& path, const LabelVolume& lv) { binary::write_file(path, encode_stl1(lv)); }
inline LabelVolume read_labels(const std::string& path) { return decode_stl1(binary::read_file(path)); }

}  // namespace stace
