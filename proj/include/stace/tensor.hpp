#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stace/binary_io.hpp"
#include "stace/error.hpp"

namespace stace {

/// Spatio-temporal extent of a volume: frames, rows, cols.
struct Extent {
    std::size_t t = 1, h = 1, w = 1;

    std::size_t voxels() const { return t * h * w; }
    friend bool operator==(const Extent&, const Extent&) = default;
};

inline std::string to_string(const Extent& e) {
    return std::to_string(e.t) + "x" + std::to_string(e.h) + "x" + std::to_string(e.w);
}

/// Dense T x H x W x C float volume, row-major with channels innermost.
class VideoTensor {
public:
    VideoTensor() = default;
    VideoTensor(Extent extent, std::size_t channels, float fill = 0.0f)
        : extent_(extent), channels_(channels), data_(extent.voxels() * channels, fill) {
        detail::require(extent.t > 0 && extent.h > 0 && extent.w > 0 && channels > 0,
                        "VideoTensor dims must be positive");
    }
    VideoTensor(Extent extent, std::size_t channels, std::vector<float> data)
        : extent_(extent), channels_(channels), data_(std::move(data)) {
        detail::require(extent.t > 0 && extent.h > 0 && extent.w > 0 && channels > 0,
                        "VideoTensor dims must be positive");
        detail::require(data_.size() == extent.voxels() * channels, "VideoTensor data length != T*H*W*C");
    }

    const Extent& extent() const { return extent_; }
    std::size_t channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t voxel_index(std::size_t t, std::size_t h, std::size_t w) const {
        return (t * extent_.h + h) * extent_.w + w;
    }

    float& at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) {
        return data_[voxel_index(t, h, w) * channels_ + c];
    }
    float at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) const {
        return data_[voxel_index(t, h, w) * channels_ + c];
    }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    std::vector<float>& storage() { return data_; }

    friend bool operator==(const VideoTensor&, const VideoTensor&) = default;

private:
    Extent extent_{};
    std::size_t channels_ = 0;
    std::vector<float> data_;
};

/// Per-voxel membership over a (T,H,W) extent.
class VoxelMask {
public:
    VoxelMask() = default;
    explicit VoxelMask(Extent extent, bool fill = false) : extent_(extent), data_(extent.voxels(), fill ? 1 : 0) {}
    VoxelMask(Extent extent, std::vector<std::uint8_t> data) : extent_(extent), data_(std::move(data)) {
        detail::require(data_.size() == extent.voxels(), "VoxelMask data length != T*H*W");
    }

    const Extent& extent() const { return extent_; }
    std::size_t size() const { return data_.size(); }

    bool operator[](std::size_t i) const { return data_[i] != 0; }
    void set(std::size_t i, bool v = true) { data_[i] = v ? 1 : 0; }
    bool at(std::size_t t, std::size_t h, std::size_t w) const {
        return data_[(t * extent_.h + h) * extent_.w + w] != 0;
    }

    std::size_t count() const {
        return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
    }

    std::span<const std::uint8_t> data() const { return data_; }

    VoxelMask& operator|=(const VoxelMask& o) {
        detail::require(o.extent_ == extent_, "mask extent mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] |= o.data_[i];
        return *this;
    }

    friend bool operator==(const VoxelMask&, const VoxelMask&) = default;

private:
    Extent extent_{};
    std::vector<std::uint8_t> data_;
};

/// Half-open box (t0,t1) x (h0,h1) x (w0,w1).
struct Box {
    std::size_t t0 = 0, t1 = 0, h0 = 0, h1 = 0, w0 = 0, w1 = 0;

    Extent extent() const { return {t1 - t0, h1 - h0, w1 - w0}; }
    friend bool operator==(const Box&, const Box&) = default;
};

namespace detail {

/// Corner-aligned source coordinate for output index `i` of `n_out` over `n_in`.
/// A single output sample maps to the center of the input range.
inline double source_coord(std::size_t i, std::size_t n_in, std::size_t n_out) {
    if (n_out == 1) return 0.5 * static_cast<double>(n_in - 1);
    return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
}

struct LerpTap {
    std::size_t lo, hi;
    double frac;
};

inline std::vector<LerpTap> lerp_taps(std::size_t n_in, std::size_t n_out) {
    std::vector<LerpTap> taps(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double x = source_coord(i, n_in, n_out);
        auto lo = static_cast<std::size_t>(std::floor(x));
        lo = std::min(lo, n_in - 1);
        const std::size_t hi = std::min(lo + 1, n_in - 1);
        taps[i] = {lo, hi, x - static_cast<double>(lo)};
    }
    return taps;
}

inline std::vector<std::size_t> nearest_taps(std::size_t n_in, std::size_t n_out) {
    std::vector<std::size_t> taps(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double x = source_coord(i, n_in, n_out);
        taps[i] = std::min(static_cast<std::size_t>(std::floor(x + 0.5)), n_in - 1);
    }
    return taps;
}

}  // namespace detail

/// Trilinear resampling over (t,h,w) with corner-aligned sampling, per channel.
/// Same-extent resizes return the input unchanged.
inline VideoTensor resize_trilinear(const VideoTensor& in, Extent target) {
    detail::require(target.t > 0 && target.h > 0 && target.w > 0, "resize target dims must be >= 1");
    if (target == in.extent()) return in;

    const auto& src = in.extent();
    const std::size_t channels = in.channels();
    const auto tt = detail::lerp_taps(src.t, target.t);
    const auto th = detail::lerp_taps(src.h, target.h);
    const auto tw = detail::lerp_taps(src.w, target.w);

    VideoTensor out(target, channels);
    for (std::size_t t = 0; t < target.t; ++t) {
        for (std::size_t h = 0; h < target.h; ++h) {
            for (std::size_t w = 0; w < target.w; ++w) {
                const auto& a = tt[t];
                const auto& b = th[h];
                const auto& c = tw[w];
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    auto sample = [&](std::size_t ti, std::size_t hi, std::size_t wi) {
                        return static_cast<double>(in.at(ti, hi, wi, ch));
                    };
                    // A zero weight skips the far tap so exact grid hits reproduce the input bits.
                    auto lerp_w = [&](std::size_t ti, std::size_t hi) {
                        double v = sample(ti, hi, c.lo);
                        if (c.frac != 0.0) v += c.frac * (sample(ti, hi, c.hi) - v);
                        return v;
                    };
                    auto lerp_hw = [&](std::size_t ti) {
                        double v = lerp_w(ti, b.lo);
                        if (b.frac != 0.0) v += b.frac * (lerp_w(ti, b.hi) - v);
                        return v;
                    };
                    double v = lerp_hw(a.lo);
                    if (a.frac != 0.0) v += a.frac * (lerp_hw(a.hi) - v);
                    out.at(t, h, w, ch) = static_cast<float>(v);
                }
            }
        }
    }
    return out;
}

/// Nearest-neighbor mask resampling on the same corner-aligned grid as resize_trilinear.
inline VoxelMask resize_nearest(const VoxelMask& in, Extent target) {
    detail::require(target.t > 0 && target.h > 0 && target.w > 0, "resize target dims must be >= 1");
    if (target == in.extent()) return in;
    const auto& src = in.extent();
    const auto nt = detail::nearest_taps(src.t, target.t);
    const auto nh = detail::nearest_taps(src.h, target.h);
    const auto nw = detail::nearest_taps(src.w, target.w);
    VoxelMask out(target);
    std::size_t i = 0;
    for (std::size_t t = 0; t < target.t; ++t)
        for (std::size_t h = 0; h < target.h; ++h)
            for (std::size_t w = 0; w < target.w; ++w, ++i) out.set(i, in.at(nt[t], nh[h], nw[w]));
    return out;
}

/// Voxel-wise select: src where mask is set, base elsewhere.
inline VideoTensor compose_masked(const VideoTensor& base, const VideoTensor& src, const VoxelMask& mask) {
    detail::require(base.extent() == src.extent() && base.extent() == mask.extent(),
                    "compose_masked: extent mismatch");
    detail::require(base.channels() == src.channels(), "compose_masked: channel mismatch");
    VideoTensor out = base;
    const std::size_t channels = base.channels();
    auto dst = out.data();
    auto from = src.data();
    for (std::size_t v = 0; v < mask.size(); ++v) {
        if (!mask[v]) continue;
        std::copy_n(from.begin() + static_cast<std::ptrdiff_t>(v * channels), channels,
                    dst.begin() + static_cast<std::ptrdiff_t>(v * channels));
    }
    return out;
}

inline VideoTensor crop(const VideoTensor& in, const Box& box) {
    VideoTensor out(box.extent(), in.channels());
    const std::size_t channels = in.channels();
    auto dst = out.data().begin();
    for (std::size_t t = box.t0; t < box.t1; ++t)
        for (std::size_t h = box.h0; h < box.h1; ++h) {
            auto row = in.data().begin() + static_cast<std::ptrdiff_t>(in.voxel_index(t, h, box.w0) * channels);
            dst = std::copy_n(row, (box.w1 - box.w0) * channels, dst);
        }
    return out;
}

inline VoxelMask crop(const VoxelMask& in, const Box& box) {
    VoxelMask out(box.extent());
    std::size_t i = 0;
    for (std::size_t t = box.t0; t < box.t1; ++t)
        for (std::size_t h = box.h0; h < box.h1; ++h)
            for (std::size_t w = box.w0; w < box.w1; ++w, ++i) out.set(i, in.at(t, h, w));
    return out;
}

/// Tensor filled with one value per channel.
inline VideoTensor constant_video(Extent extent, std::span<const float> per_channel) {
    VideoTensor out(extent, per_channel.size());
    auto d = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = per_channel[i % per_channel.size()];
    return out;
}

// ---------------------------------------------------------------------------
// STV1 / STM0 files: "STV1" | u32 T,H,W,C | payload, all little-endian.

namespace detail {

inline constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

struct Header4 {
    std::uint32_t d[4];
};

inline Header4 read_header4(binary::Reader& r, std::string_view magic) {
    if (r.remaining() < 4) throw ParseError(ParseError::Kind::Truncated, "file shorter than magic");
    const auto got = r.str(4);
    if (got != magic)
        throw ParseError(ParseError::Kind::BadMagic, "bad magic '" + got + "', expected '" + std::string(magic) + "'");
    Header4 h{};
    std::uint64_t n = 1;
    for (auto& d : h.d) {
        d = r.u32();
        if (d == 0) throw ParseError(ParseError::Kind::Syntax, "zero dimension in header");
        n *= d;
        if (n > kMaxElements) throw ParseError(ParseError::Kind::DimOverflow, "dimensions overflow element limit");
    }
    return h;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_stv1(const VideoTensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(20 + 4 * t.size());
    binary::put_bytes(out, "STV1");
    const auto& e = t.extent();
    for (auto d : {e.t, e.h, e.w, t.channels()}) binary::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) binary::put_f32(out, v);
    return out;
}

inline VideoTensor decode_stv1(std::span<const std::uint8_t> bytes) {
    binary::Reader r(bytes);
    const auto h = detail::read_header4(r, "STV1");
    const std::size_t n = std::size_t{h.d[0]} * h.d[1] * h.d[2] * h.d[3];
    if (r.remaining() < 4 * n) throw ParseError(ParseError::Kind::Truncated, "truncated STV1 payload");
    if (r.remaining() > 4 * n) throw ParseError(ParseError::Kind::Syntax, "trailing bytes after STV1 payload");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    return VideoTensor({h.d[0], h.d[1], h.d[2]}, h.d[3], std::move(data));
}

inline std::vector<std::uint8_t> encode_stm0(const VoxelMask& m) {
    std::vector<std::uint8_t> out;
    out.reserve(20 + m.size());
    binary::put_bytes(out, "STM0");
    const auto& e = m.extent();
    for (auto d : {e.t, e.h, e.w, std::size_t{1}}) binary::put_u32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), m.data().begin(), m.data().end());
    return out;
}

inline VoxelMask decode_stm0(std::span<const std::uint8_t> bytes) {
    binary::Reader r(bytes);
    const auto h = detail::read_header4(r, "STM0");
    if (h.d[3] != 1) throw ParseError(ParseError::Kind::ShapeMismatch, "STM0 requires C == 1");
    const std::size_t n = std::size_t{h.d[0]} * h.d[1] * h.d[2];
    if (r.remaining() < n) throw ParseError(ParseError::Kind::Truncated, "truncated STM0 payload");
    if (r.remaining() > n) throw ParseError(ParseError::Kind::Syntax, "trailing bytes after STM0 payload");
    std::vector<std::uint8_t> data(n);
    for (auto& v : data) {
        v = r.u8();
        if (v > 1) throw ParseError(ParseError::Kind::Syntax, "STM0 payload byte not 0/1");
    }
    return VoxelMask({h.d[0], h.d[1], h.d[2]}, std::move(data));
}

inline void write_tensor(const std::string& path, const VideoTensor& t) { binary::write_file(path, encode_stv1(t)); }
inline VideoTensor read_tensor(const std::string& path) { return decode_stv1(binary::read_file(path)); }
inline void write_mask(const std::string& path, const VoxelMask& m) { binary::write_file(path, encode_stm0(m)); }
inline VoxelMask read_mask(const std::string& path) { return decode_stm0(binary::read_file(path)); }

}  // namespace stace
