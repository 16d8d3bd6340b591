#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "stace/dataset.hpp"
#include "stace/supervoxel.hpp"

using namespace stace;

namespace {

/// Labels a and b describe the same partition (up to renaming).
bool same_partition(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    if (a.size() != b.size()) return false;
    std::map<std::uint32_t, std::uint32_t> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto [it1, new1] = ab.emplace(a[i], b[i]);
        auto [it2, new2] = ba.emplace(b[i], a[i]);
        if (it1->second != b[i] || it2->second != a[i]) return false;
    }
    return true;
}

void expect_valid_labels(const LabelVolume& lv) {
    ASSERT_EQ(lv.labels.size(), lv.extent.voxels());
    std::vector<bool> seen(lv.n_segments, false);
    std::uint32_t next = 0;
    for (auto l : lv.labels) {
        ASSERT_LT(l, lv.n_segments);
        // compaction in first-occurrence order
        if (!seen[l]) {
            EXPECT_EQ(l, next);
            ++next;
        }
        seen[l] = true;
    }
    for (bool s : seen) EXPECT_TRUE(s);
}

VideoTensor halves_video(Extent e) {
    VideoTensor v(e, 1);
    for (std::size_t t = 0; t < e.t; ++t)
        for (std::size_t h = 0; h < e.h; ++h)
            for (std::size_t w = 0; w < e.w; ++w) v.at(t, h, w, 0) = w < e.w / 2 ? 0.1f : 0.9f;
    return v;
}

Segment fake_segment(const std::string& video, std::uint32_t label, std::size_t volume, Descriptor d) {
    Segment s;
    s.video_id = video;
    s.label_id = label;
    s.mask = VoxelMask({1, 1, 64});
    for (std::size_t i = 0; i < volume; ++i) s.mask.set(i);
    s.bbox = {0, 1, 0, 1, 0, volume};
    s.descriptor = d;
    return s;
}

}  // namespace

TEST(Slic, ConstantVideoMatchesNearestInitialCenter) {
    const VideoTensor v({8, 8, 8}, 1, 0.4f);
    const auto lv = slic3d(v, 8, 0.3, 10, 0);
    expect_valid_labels(lv);
    EXPECT_EQ(lv.n_segments, 8u);

    // Oracle: brute-force nearest of the 2x2x2 grid of initial centers.
    std::vector<std::array<double, 3>> centers;
    for (double a : {1.5, 5.5})
        for (double b : {1.5, 5.5})
            for (double c : {1.5, 5.5}) centers.push_back({a, b, c});
    std::vector<std::uint32_t> oracle;
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t h = 0; h < 8; ++h)
            for (std::size_t w = 0; w < 8; ++w) {
                double best = 1e9;
                std::uint32_t arg = 0;
                for (std::uint32_t k = 0; k < centers.size(); ++k) {
                    const double d = std::pow(t - centers[k][0], 2) + std::pow(h - centers[k][1], 2) +
                                     std::pow(w - centers[k][2], 2);
                    if (d < best) best = d, arg = k;
                }
                oracle.push_back(arg);
            }
    EXPECT_TRUE(same_partition(lv.labels, oracle));
    // the blocks are the 4x4x4 octants
    for (std::size_t i = 0; i < 512; ++i) {
        const std::size_t t = i / 64, h = i / 8 % 8, w = i % 8;
        EXPECT_EQ(lv.labels[i], lv.labels[(t / 4 * 4) * 64 + (h / 4 * 4) * 8 + (w / 4 * 4)]);
    }
}

TEST(Slic, SingleSegment) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(0, 1);
    VideoTensor v({4, 6, 6}, 3);
    for (auto& x : v.data()) x = u(rng);
    const auto lv = slic3d(v, 1, 0.3, 5, 0);
    EXPECT_EQ(lv.n_segments, 1u);
    for (auto l : lv.labels) EXPECT_EQ(l, 0u);
}

TEST(Slic, HalvesArePure) {
    const Extent e{8, 16, 16};
    const auto v = halves_video(e);
    const auto lv = slic3d(v, 2, 0.3, 10, 0);
    expect_valid_labels(lv);
    std::vector<std::array<std::size_t, 2>> counts(lv.n_segments, {0, 0});
    for (std::size_t i = 0; i < lv.labels.size(); ++i) counts[lv.labels[i]][i % e.w < e.w / 2 ? 0 : 1]++;
    for (const auto& c : counts) {
        const double purity = static_cast<double>(std::max(c[0], c[1])) / static_cast<double>(c[0] + c[1]);
        EXPECT_GE(purity, 0.95);
    }
}

TEST(Slic, InvariantsOnSyntheticVideos) {
    const auto ds = synth_dataset(3, 2, {16, 32, 32}, 21);
    for (const auto& it : ds.items)
        for (std::size_t n : {4u, 16u, 64u}) {
            const auto r = slic3d_detailed(it.video, n, 0.3, 10, 5);
            expect_valid_labels(r.labels);
            EXPECT_LE(r.labels.n_segments, n);
            EXPECT_GE(r.labels.n_segments, 1u);
            ASSERT_GE(r.objective.size(), 2u);
            for (std::size_t k = 1; k < r.objective.size(); ++k)
                EXPECT_LE(r.objective[k], r.objective[k - 1] * (1 + 1e-12)) << it.id << " n=" << n << " iter " << k;
            const auto again = slic3d_detailed(it.video, n, 0.3, 10, 5);
            EXPECT_EQ(again.labels.labels, r.labels.labels);
        }
}

TEST(Slic, ObjectiveOracle) {
    // Recompute the reported final objective from the labels themselves.
    const auto ds = synth_dataset(2, 2, {8, 16, 16}, 3);
    const auto& v = ds.items[0].video;
    const double comp = 0.3;
    const std::size_t n = 16;
    const auto r = slic3d_detailed(v, n, comp, 10, 0);
    const double S = std::cbrt(static_cast<double>(v.extent().voxels()) / n);
    const std::size_t K = r.labels.n_segments;
    std::vector<std::array<double, 6>> sum(K, std::array<double, 6>{});
    std::vector<double> cnt(K, 0);
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t h = 0; h < 16; ++h)
            for (std::size_t w = 0; w < 16; ++w) {
                const auto l = r.labels.labels[v.voxel_index(t, h, w)];
                for (std::size_t c = 0; c < 3; ++c) sum[l][c] += v.at(t, h, w, c);
                sum[l][3] += t, sum[l][4] += h, sum[l][5] += w;
                cnt[l]++;
            }
    double obj = 0;
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t h = 0; h < 16; ++h)
            for (std::size_t w = 0; w < 16; ++w) {
                const auto l = r.labels.labels[v.voxel_index(t, h, w)];
                double d = 0;
                for (std::size_t c = 0; c < 3; ++c) d += std::pow(v.at(t, h, w, c) - sum[l][c] / cnt[l], 2);
                const double sp = std::pow(t - sum[l][3] / cnt[l], 2) + std::pow(h - sum[l][4] / cnt[l], 2) +
                                  std::pow(w - sum[l][5] / cnt[l], 2);
                obj += d + sp * (comp / S) * (comp / S);
            }
    // the last objective is measured against the centers after the final update
    EXPECT_NEAR(r.objective.back(), obj, 1e-6 * obj);
}

TEST(Slic, Preconditions) {
    VideoTensor v({2, 2, 2}, 1);
    EXPECT_THROW(slic3d(v, 9, 0.3, 5), InvalidArgument);
    EXPECT_THROW(slic3d(v, 0, 0.3, 5), InvalidArgument);
    EXPECT_THROW(slic3d(v, 2, 0.0, 5), InvalidArgument);
    EXPECT_THROW(slic3d(v, 2, 0.3, 0), InvalidArgument);
}

TEST(Multilevel, CountsAreUpperBounds) {
    const auto ds = synth_dataset(2, 2, {16, 32, 32}, 8);
    for (const auto& it : ds.items) {
        const auto lv = multilevel_segment(it.video, {64, 16, 4}, 0.3, 1);
        EXPECT_LE(lv.small.n_segments, 64u);
        EXPECT_LE(lv.middle.n_segments, 16u);
        EXPECT_LE(lv.large.n_segments, 4u);
        EXPECT_GE(lv.large.n_segments, 1u);
        const auto again = multilevel_segment(it.video, {64, 16, 4}, 0.3, 1);
        EXPECT_EQ(again.small.labels, lv.small.labels);
        EXPECT_EQ(again.large.labels, lv.large.labels);
        // mean segment volume strictly decreases from large to small
        const double V = static_cast<double>(it.video.extent().voxels());
        EXPECT_GT(V / lv.large.n_segments, V / lv.middle.n_segments);
        EXPECT_GT(V / lv.middle.n_segments, V / lv.small.n_segments);
    }
    EXPECT_THROW(multilevel_segment(ds.items[0].video, {4, 16, 64}, 0.3, 1), InvalidArgument);
}

TEST(Segments, LevelsPartitionTheVideo) {
    const auto ds = synth_dataset(2, 2, {16, 32, 32}, 2);
    const auto& v = ds.items[0].video;
    const auto lv = multilevel_segment(v, {64, 16, 4}, 0.3, 0);
    const auto segs = extract_segments("v", v, lv);
    std::map<Level, std::size_t> total;
    for (const auto& s : segs) {
        total[s.level] += s.volume();
        EXPECT_GE(s.volume(), 1u);
        for (float d : s.descriptor) EXPECT_TRUE(std::isfinite(d));
        for (int k = 3; k < 7; ++k) {
            EXPECT_GE(s.descriptor[k], 0.0f);
            EXPECT_LE(s.descriptor[k], 1.0f);
        }
        // bbox is the tight bound of the mask
        Box b{99, 0, 99, 0, 99, 0};
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t h = 0; h < 32; ++h)
                for (std::size_t w = 0; w < 32; ++w)
                    if (s.mask.at(t, h, w)) {
                        b.t0 = std::min(b.t0, t), b.t1 = std::max(b.t1, t + 1);
                        b.h0 = std::min(b.h0, h), b.h1 = std::max(b.h1, h + 1);
                        b.w0 = std::min(b.w0, w), b.w1 = std::max(b.w1, w + 1);
                    }
        EXPECT_EQ(s.bbox, b);
    }
    for (Level l : kLevels) EXPECT_EQ(total[l], v.extent().voxels());
}

TEST(Segments, ConstantVideoSharesColor) {
    const VideoTensor v({8, 8, 8}, 3, 0.25f);
    const auto segs = extract_segments("c", v, multilevel_segment(v, {8, 4, 2}, 0.3, 0));
    for (const auto& s : segs)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(s.descriptor[c], segs[0].descriptor[c]);
}

TEST(Segments, SingleVoxelBoundingBox) {
    const VideoTensor v({3, 4, 5}, 1, 0.0f);
    LabelVolume lv{v.extent(), std::vector<std::uint32_t>(60, 0), 2};
    lv.labels[v.voxel_index(2, 1, 3)] = 1;
    const SegmentationLevels levels{lv, lv, lv};
    const auto segs = extract_segments("v", v, levels);
    const auto& single = segs[1];
    EXPECT_EQ(single.volume(), 1u);
    EXPECT_EQ(single.bbox, (Box{2, 3, 1, 2, 3, 4}));
}

TEST(Dedupe, IdenticalDescriptorsKeepOne) {
    const Descriptor d{0.3f, 0.3f, 0.3f, 0.5f, 0.5f, 0.5f, 0.1f};
    std::vector<Segment> in{fake_segment("v", 0, 5, d), fake_segment("v", 1, 5, d)};
    const auto out = dedupe_segments(in, 0.99);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].label_id, 0u);  // equal volume: higher label id dropped
}

TEST(Dedupe, TauOneKeepsDistinct) {
    std::vector<Segment> in;
    for (std::uint32_t k = 0; k < 5; ++k)
        in.push_back(fake_segment("v", k, 3, {0.1f * k + 0.1f, 0.2f, 0.3f, 0.9f - 0.1f * k, 0.5f, 0.5f, 0.05f}));
    const auto out = dedupe_segments(in, 1.0);
    ASSERT_EQ(out.size(), in.size());
    for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out[i].label_id, in[i].label_id);
}

TEST(Dedupe, MutuallySimilarKeepsLargest) {
    // Hand trace: all three pairs exceed tau. Greedy drops the smaller member
    // of the most similar pair first, then the next live pair.
    std::vector<Segment> in{fake_segment("v", 0, 10, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.100f}),
                            fake_segment("v", 1, 20, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.101f}),
                            fake_segment("v", 2, 30, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.102f})};
    const auto out = dedupe_segments(in, 0.95);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].volume(), 30u);
}

TEST(Dedupe, OnlyWithinOneVideo) {
    const Descriptor d{0.3f, 0.3f, 0.3f, 0.5f, 0.5f, 0.5f, 0.1f};
    std::vector<Segment> in{fake_segment("a", 0, 5, d), fake_segment("b", 0, 5, d)};
    EXPECT_EQ(dedupe_segments(in, 0.95).size(), 2u);
}

TEST(Dedupe, NeverGrowsAndIsIdempotent) {
    const auto ds = synth_dataset(2, 2, {16, 32, 32}, 6);
    for (const auto& it : ds.items)
        for (double tau : {0.9, 0.95, 0.99, 0.995}) {
            const auto segs = extract_segments(it.id, it.video, multilevel_segment(it.video, {64, 16, 4}, 0.3, 0));
            const auto once = dedupe_segments(segs, tau);
            const auto twice = dedupe_segments(once, tau);
            EXPECT_LE(once.size(), segs.size());
            ASSERT_EQ(once.size(), twice.size());
            for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(ref_of(once[i]), ref_of(twice[i]));
        }
    EXPECT_THROW(dedupe_segments({}, 0.0), InvalidArgument);
    EXPECT_THROW(dedupe_segments({}, 1.5), InvalidArgument);
}

TEST(Slic, BoundaryAdherenceOnSyntheticObjects) {
    // share of object voxels that land in small-level segments whose majority is object
    const auto ds = synth_dataset(4, 5, {16, 32, 32}, 13);
    for (const auto& it : ds.items) {
        const auto lv = slic3d(it.video, 64, 0.3, 10, 0);
        const auto& gt = *it.ground_truth;
        std::vector<std::size_t> obj(lv.n_segments, 0), all(lv.n_segments, 0);
        for (std::size_t i = 0; i < lv.labels.size(); ++i) {
            all[lv.labels[i]]++;
            obj[lv.labels[i]] += gt[i];
        }
        std::size_t covered = 0;
        for (std::size_t i = 0; i < lv.labels.size(); ++i)
            if (gt[i] && 2 * obj[lv.labels[i]] > all[lv.labels[i]]) ++covered;
        EXPECT_GE(static_cast<double>(covered) / static_cast<double>(gt.count()), 0.6) << it.id;
    }
}

TEST(LabelIo, RoundTripAndErrors) {
    const auto ds = synth_dataset(2, 2, {8, 16, 16}, 1);
    const auto lv = slic3d(ds.items[0].video, 16, 0.3, 5);
    const auto bytes = encode_stl1(lv);
    EXPECT_EQ(bytes.size(), 20u + 4u * lv.labels.size());
    const auto back = decode_stl1(bytes);
    EXPECT_EQ(back.labels, lv.labels);
    EXPECT_EQ(back.n_segments, lv.n_segments);
    EXPECT_EQ(back.extent, lv.extent);

    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_stl1(bad), ParseError);
    auto trunc = bytes;
    trunc.resize(trunc.size() - 2);
    EXPECT_THROW(decode_stl1(trunc), ParseError);
    auto out_of_range = bytes;
    out_of_range[20] = 0xFF;
    EXPECT_THROW(decode_stl1(out_of_range), ParseError);
}
