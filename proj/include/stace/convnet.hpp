#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <experimental/simd>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stace/binary_io.hpp"
#include "stace/dataset.hpp"
#include "stace/error.hpp"
#include "stace/tensor.hpp"

namespace stace {

struct Prediction {
    std::vector<float> logits;
    int label = 0;
};

inline int argmax(std::span<const float> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Numerically stable softmax in double precision.
inline std::vector<double> softmax(std::span<const float> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(static_cast<double>(logits[i]) - m);
    for (auto& x : p) x /= z;
    return p;
}

/// What the explanation pipeline needs from a video classifier: logits, the
/// activations f_l(v) at a named layer, and the gradient of one logit with
/// respect to those activations. Activation width per layer is fixed.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;

    virtual int num_classes() const = 0;
    virtual Extent input_extent() const = 0;
    virtual std::size_t input_channels() const = 0;
    virtual std::vector<std::string> layer_names() const = 0;
    virtual std::vector<std::size_t> layer_shape(std::string_view layer) const = 0;

    virtual Prediction predict(const VideoTensor& video) const = 0;
    virtual std::vector<float> activations(const VideoTensor& video, std::string_view layer) const = 0;
    virtual std::vector<float> grad_logit_wrt_activations(const VideoTensor& video, int y,
                                                          std::string_view layer) const = 0;

    std::size_t layer_size(std::string_view layer) const {
        const auto s = layer_shape(layer);
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    /// Resamples `video` to the model input extent when needed.
    VideoTensor to_input(const VideoTensor& video) const {
        detail::require(video.channels() == input_channels(), "video channel count does not match model input");
        return video.extent() == input_extent() ? video : resize_trilinear(video, input_extent());
    }
};

// ---------------------------------------------------------------------------
// Builtin 3-D ConvNet
//
// Three blocks of conv3d(k=3, pad=1) + ReLU + maxpool(2^3), global average
// pooling ("gap"), then FC + ReLU ("fc1") and FC to logits. Tensors inside the
// net are channel-first (C,T,H,W).

struct Conv3dLayer {
    std::size_t in_ch = 0, out_ch = 0;
    std::vector<float> weight;  // [out][in][3][3][3]
    std::vector<float> bias;    // [out]
};

struct DenseLayer {
    std::size_t in = 0, out = 0;
    std::vector<float> weight;  // [out][in]
    std::vector<float> bias;    // [out]
};

/// `Input` as a backprop stop means "differentiate every layer".
enum class NetLayer { Block1, Block2, Block3, Gap, Fc1, Logits, Input };

namespace kernels {

/// Geometry of a zero-padded (T+2)x(H+2)x(W+2) channel volume. In padded
/// coordinates every 3x3x3 tap is a constant offset, so a convolution becomes
/// 27 shifted multiply-adds over one contiguous index range.
struct PaddedGeometry {
    static constexpr std::size_t kBlock = 64;

    std::size_t T, H, W, Hp, Wp, plane, span, stride;
    std::array<std::size_t, 27> offset;

    explicit PaddedGeometry(Extent e)
        : T(e.t), H(e.h), W(e.w), Hp(e.h + 2), Wp(e.w + 2), plane(Hp * Wp) {
        // Output index j = (t*Hp + h)*Wp + w reads input j + offset[tap].
        span = (T * plane + kBlock - 1) / kBlock * kBlock;
        stride = span + 2 * plane + 2 * Wp + 2 + kBlock;
        for (std::size_t kt = 0; kt < 3; ++kt)
            for (std::size_t kh = 0; kh < 3; ++kh)
                for (std::size_t kw = 0; kw < 3; ++kw) offset[kt * 9 + kh * 3 + kw] = kt * plane + kh * Wp + kw;
    }

    std::size_t max_offset() const { return offset[26]; }

    /// Channel-first compact tensor -> zero-padded volumes, `stride` apart.
    std::vector<float> pad(const float* in, std::size_t channels) const {
        std::vector<float> out(channels * stride, 0.0f);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t h = 0; h < H; ++h)
                    std::copy_n(in + ((c * T + t) * H + h) * W, W,
                                out.begin() + static_cast<std::ptrdiff_t>(c * stride + ((t + 1) * Hp + h + 1) * Wp + 1));
        return out;
    }
};

namespace stdx = std::experimental;
using FloatVec = stdx::native_simd<float>;
inline constexpr std::size_t kLanes = FloatVec::size();
inline constexpr std::size_t kRegs = PaddedGeometry::kBlock / kLanes;
static_assert(PaddedGeometry::kBlock % kLanes == 0);

inline FloatVec load(const float* p) { return FloatVec(p, stdx::element_aligned); }

/// Sum over 27 taps and `n_src` source channels of weight * shifted source,
/// for one block of kBlock consecutive indices starting at `base`.
/// `weight(c, tap)` gives the scalar weight, `src(c)` the channel pointer.
template <class WeightFn, class SrcFn>
inline void accumulate_block(std::size_t n_src, WeightFn weight, SrcFn src, const std::array<std::size_t, 27>& offset,
                             bool negate_offset, float init, float* dst) {
    FloatVec acc[kRegs];
    for (auto& a : acc) a = FloatVec(init);
    for (std::size_t c = 0; c < n_src; ++c) {
        const float* x = src(c);
        for (std::size_t tap = 0; tap < 27; ++tap) {
            const FloatVec kk(weight(c, tap));
            const float* p = negate_offset ? x - offset[tap] : x + offset[tap];
            for (std::size_t r = 0; r < kRegs; ++r) acc[r] += kk * load(p + r * kLanes);
        }
    }
    for (std::size_t r = 0; r < kRegs; ++r) acc[r].copy_to(dst + r * kLanes, stdx::element_aligned);
}

inline void conv3d_forward(const float* in, std::size_t in_ch, Extent e, const Conv3dLayer& L, float* out) {
    constexpr std::size_t B = PaddedGeometry::kBlock;
    const PaddedGeometry g(e);
    const std::vector<float> xp = g.pad(in, in_ch);
    std::vector<float> op(g.span);
    for (std::size_t oc = 0; oc < L.out_ch; ++oc) {
        const float* k = &L.weight[oc * in_ch * 27];
        for (std::size_t j0 = 0; j0 < g.span; j0 += B)
            accumulate_block(
                in_ch, [&](std::size_t ic, std::size_t tap) { return k[ic * 27 + tap]; },
                [&](std::size_t ic) { return xp.data() + ic * g.stride + j0; }, g.offset, false, L.bias[oc],
                op.data() + j0);
        for (std::size_t t = 0; t < g.T; ++t)
            for (std::size_t h = 0; h < g.H; ++h)
                std::copy_n(op.begin() + static_cast<std::ptrdiff_t>((t * g.Hp + h) * g.Wp), g.W,
                            out + ((oc * g.T + t) * g.H + h) * g.W);
    }
}

/// Accumulates weight/bias gradients into dW/db and, when `din` is non-null,
/// writes the input gradient into din.
inline void conv3d_backward(const float* in, std::size_t in_ch, Extent e, const Conv3dLayer& L, const float* dout,
                            float* dW, float* db, float* din) {
    constexpr std::size_t B = PaddedGeometry::kBlock;
    const PaddedGeometry g(e);
    const std::size_t front = g.max_offset();
    // dout in output-index layout, zero at padding columns/rows, with `front`
    // leading zeros so that j - offset never underflows.
    const std::size_t dstride = front + g.stride;
    std::vector<float> dp(L.out_ch * dstride, 0.0f);
    for (std::size_t oc = 0; oc < L.out_ch; ++oc)
        for (std::size_t t = 0; t < g.T; ++t)
            for (std::size_t h = 0; h < g.H; ++h)
                std::copy_n(dout + ((oc * g.T + t) * g.H + h) * g.W, g.W,
                            dp.begin() + static_cast<std::ptrdiff_t>(oc * dstride + front + (t * g.Hp + h) * g.Wp));

    if (db)
        for (std::size_t oc = 0; oc < L.out_ch; ++oc) {
            double s = 0.0;
            const float* d = dout + oc * e.voxels();
            for (std::size_t v = 0; v < e.voxels(); ++v) s += d[v];
            db[oc] += static_cast<float>(s);
        }

    if (dW) {
        const std::vector<float> xp = g.pad(in, in_ch);
        for (std::size_t oc = 0; oc < L.out_ch; ++oc) {
            const float* d = dp.data() + oc * dstride + front;
            for (std::size_t ic = 0; ic < in_ch; ++ic)
                for (std::size_t tap = 0; tap < 27; ++tap) {
                    const float* x = xp.data() + ic * g.stride + g.offset[tap];
                    FloatVec acc[kRegs] = {};
                    for (std::size_t j = 0; j < g.span; j += B)
                        for (std::size_t r = 0; r < kRegs; ++r)
                            acc[r] += load(d + j + r * kLanes) * load(x + j + r * kLanes);
                    for (std::size_t r = 1; r < kRegs; ++r) acc[0] += acc[r];
                    dW[(oc * in_ch + ic) * 27 + tap] += stdx::reduce(acc[0]);
                }
        }
    }

    if (din) {
        // din_pad[p] = sum over (oc, tap) of k * dout[p - offset[tap]]; only interior p are kept.
        const std::size_t first = g.plane + g.Wp + 1;
        const std::size_t last = (g.T * g.Hp + g.H) * g.Wp + g.W + 1;  // one past the last interior index
        std::vector<float> ip(((last - first) + B - 1) / B * B);
        for (std::size_t ic = 0; ic < in_ch; ++ic) {
            for (std::size_t p0 = 0; p0 < ip.size(); p0 += B)
                accumulate_block(
                    L.out_ch, [&](std::size_t oc, std::size_t tap) { return L.weight[(oc * in_ch + ic) * 27 + tap]; },
                    [&](std::size_t oc) { return dp.data() + oc * dstride + front + first + p0; }, g.offset, true, 0.0f,
                    ip.data() + p0);
            for (std::size_t t = 0; t < g.T; ++t)
                for (std::size_t h = 0; h < g.H; ++h)
                    std::copy_n(ip.begin() + static_cast<std::ptrdiff_t>(((t + 1) * g.Hp + h + 1) * g.Wp + 1 - first), g.W,
                                din + ((ic * g.T + t) * g.H + h) * g.W);
        }
    }
}

/// 2x2x2 max pooling; `argmax` receives the input index of each output's winner.
inline void maxpool2_forward(const float* in, std::size_t ch, Extent e, float* out, std::uint32_t* argmax) {
    const Extent o{e.t / 2, e.h / 2, e.w / 2};
    std::size_t i = 0;
    for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t t = 0; t < o.t; ++t)
            for (std::size_t h = 0; h < o.h; ++h)
                for (std::size_t w = 0; w < o.w; ++w, ++i) {
                    std::size_t best = ((c * e.t + 2 * t) * e.h + 2 * h) * e.w + 2 * w;
                    for (std::size_t dt = 0; dt < 2; ++dt)
                        for (std::size_t dh = 0; dh < 2; ++dh)
                            for (std::size_t dw = 0; dw < 2; ++dw) {
                                const std::size_t j = ((c * e.t + 2 * t + dt) * e.h + 2 * h + dh) * e.w + 2 * w + dw;
                                if (in[j] > in[best]) best = j;
                            }
                    out[i] = in[best];
                    argmax[i] = static_cast<std::uint32_t>(best);
                }
}

inline void dense_forward(const DenseLayer& L, const float* x, float* y) {
    for (std::size_t o = 0; o < L.out; ++o) {
        float s = L.bias[o];
        const float* w = &L.weight[o * L.in];
        for (std::size_t i = 0; i < L.in; ++i) s += w[i] * x[i];
        y[o] = s;
    }
}

}  // namespace kernels

/// Per-parameter gradient buffers, laid out like BuiltinNet::parameters().
using ParamGrads = std::vector<std::vector<float>>;

class BuiltinNet : public ModelBackend {
public:
    static constexpr std::array<std::size_t, 3> kConvWidths{8, 16, 32};
    static constexpr std::size_t kHidden = 64;

    BuiltinNet() : BuiltinNet(4) {}

    /// Zero-initialized net; `input` must be divisible by 8 on every axis.
    explicit BuiltinNet(int num_classes, Extent input = {16, 32, 32}, std::size_t channels = 3)
        : classes_(num_classes), input_(input), channels_(channels), input_mean_(channels, 0.0f) {
        detail::require(num_classes >= 2, "BuiltinNet: need at least 2 classes");
        detail::require(channels >= 1, "BuiltinNet: need at least 1 input channel");
        detail::require(input.t % 8 == 0 && input.h % 8 == 0 && input.w % 8 == 0 && input.t > 0 && input.h > 0 &&
                            input.w > 0,
                        "BuiltinNet: input dims must be positive multiples of 8");
        std::size_t in = channels;
        for (std::size_t b = 0; b < 3; ++b) {
            auto& c = conv_[b];
            c.in_ch = in;
            c.out_ch = kConvWidths[b];
            c.weight.assign(c.out_ch * c.in_ch * 27, 0.0f);
            c.bias.assign(c.out_ch, 0.0f);
            in = c.out_ch;
        }
        fc1_ = {in, kHidden, std::vector<float>(kHidden * in, 0.0f), std::vector<float>(kHidden, 0.0f)};
        fc2_ = {kHidden, static_cast<std::size_t>(num_classes),
                std::vector<float>(kHidden * static_cast<std::size_t>(num_classes), 0.0f),
                std::vector<float>(static_cast<std::size_t>(num_classes), 0.0f)};
    }

    /// Seeded uniform fan-in scaled init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero.
    void init_weights(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto fill = [&](std::vector<float>& w, std::size_t fan_in) {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (auto& x : w) x = static_cast<float>(u(rng));
        };
        for (auto& c : conv_) fill(c.weight, c.in_ch * 27), std::fill(c.bias.begin(), c.bias.end(), 0.0f);
        fill(fc1_.weight, fc1_.in), std::fill(fc1_.bias.begin(), fc1_.bias.end(), 0.0f);
        fill(fc2_.weight, fc2_.in), std::fill(fc2_.bias.begin(), fc2_.bias.end(), 0.0f);
    }

    // -- ModelBackend -------------------------------------------------------

    int num_classes() const override { return classes_; }
    Extent input_extent() const override { return input_; }
    std::size_t input_channels() const override { return channels_; }

    std::vector<std::string> layer_names() const override { return {"block1", "block2", "block3", "gap", "fc1"}; }

    std::vector<std::size_t> layer_shape(std::string_view layer) const override {
        const NetLayer l = parse_layer(layer);
        switch (l) {
            case NetLayer::Block1:
            case NetLayer::Block2:
            case NetLayer::Block3: {
                const auto b = static_cast<std::size_t>(l);
                const std::size_t f = std::size_t{2} << b;
                return {kConvWidths[b], input_.t / f, input_.h / f, input_.w / f};
            }
            case NetLayer::Gap: return {fc1_.in};
            default: return {kHidden};
        }
    }

    Prediction predict(const VideoTensor& video) const override {
        check_input(video);
        Trace tr = forward(video, NetLayer::Logits);
        return {tr.logits, argmax(tr.logits)};
    }

    std::vector<float> activations(const VideoTensor& video, std::string_view layer) const override {
        check_input(video);
        const NetLayer l = parse_layer(layer);
        Trace tr = forward(video, l);
        return std::move(tr.at(l));
    }

    /// Exact reverse-mode gradient of logit `y` w.r.t. the post-nonlinearity
    /// activations at `layer`; only the layers above `layer` are differentiated.
    std::vector<float> grad_logit_wrt_activations(const VideoTensor& video, int y,
                                                  std::string_view layer) const override {
        detail::require(y >= 0 && y < classes_, "class index out of range");
        check_input(video);
        const NetLayer l = parse_layer(layer);
        Trace tr = forward(video, NetLayer::Logits);
        std::vector<float> dlogits(static_cast<std::size_t>(classes_), 0.0f);
        dlogits[static_cast<std::size_t>(y)] = 1.0f;
        return backward(tr, dlogits, l, nullptr);
    }

    // -- parameters ---------------------------------------------------------

    const std::array<Conv3dLayer, 3>& conv() const { return conv_; }
    std::array<Conv3dLayer, 3>& conv() { return conv_; }
    const DenseLayer& fc1() const { return fc1_; }
    DenseLayer& fc1() { return fc1_; }
    const DenseLayer& fc2() const { return fc2_; }
    DenseLayer& fc2() { return fc2_; }
    const std::vector<float>& input_mean() const { return input_mean_; }
    void set_input_mean(std::vector<float> m) {
        detail::require(m.size() == channels_, "input mean length must equal channel count");
        input_mean_ = std::move(m);
    }

    /// Named parameter tensors in serialization order (input_mean first).
    std::vector<std::pair<std::string, std::vector<float>*>> parameters() {
        std::vector<std::pair<std::string, std::vector<float>*>> p{{"input_mean", &input_mean_}};
        for (std::size_t b = 0; b < 3; ++b) {
            p.emplace_back("conv" + std::to_string(b + 1) + ".weight", &conv_[b].weight);
            p.emplace_back("conv" + std::to_string(b + 1) + ".bias", &conv_[b].bias);
        }
        p.emplace_back("fc1.weight", &fc1_.weight);
        p.emplace_back("fc1.bias", &fc1_.bias);
        p.emplace_back("fc2.weight", &fc2_.weight);
        p.emplace_back("fc2.bias", &fc2_.bias);
        return p;
    }

    std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_shapes() const {
        std::vector<std::pair<std::string, std::vector<std::size_t>>> s{{"input_mean", {channels_}}};
        for (std::size_t b = 0; b < 3; ++b) {
            s.push_back({"conv" + std::to_string(b + 1) + ".weight", {conv_[b].out_ch, conv_[b].in_ch, 3, 3, 3}});
            s.push_back({"conv" + std::to_string(b + 1) + ".bias", {conv_[b].out_ch}});
        }
        s.push_back({"fc1.weight", {fc1_.out, fc1_.in}});
        s.push_back({"fc1.bias", {fc1_.out}});
        s.push_back({"fc2.weight", {fc2_.out, fc2_.in}});
        s.push_back({"fc2.bias", {fc2_.out}});
        return s;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (auto& [name, p] : const_cast<BuiltinNet*>(this)->parameters())
            h = binary::fnv1a({reinterpret_cast<const std::uint8_t*>(p->data()), p->size() * sizeof(float)}, h);
        return h;
    }

    // -- training support ---------------------------------------------------

    ParamGrads zero_grads() {
        ParamGrads g;
        for (auto& [name, p] : parameters()) g.emplace_back(p->size(), 0.0f);
        return g;
    }

    /// Softmax cross-entropy for one sample; accumulates parameter gradients
    /// (input_mean slot untouched) and returns the loss.
    double accumulate_gradients(const VideoTensor& video, int label, ParamGrads& grads) const {
        check_input(video);
        Trace tr = forward(video, NetLayer::Logits);
        const auto p = softmax(tr.logits);
        std::vector<float> dlogits(p.size());
        for (std::size_t i = 0; i < p.size(); ++i)
            dlogits[i] = static_cast<float>(p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
        backward(tr, dlogits, NetLayer::Input, &grads);
        return -std::log(std::max(p[static_cast<std::size_t>(label)], 1e-300));
    }

    NetLayer parse_layer(std::string_view name) const {
        if (name == "block1") return NetLayer::Block1;
        if (name == "block2") return NetLayer::Block2;
        if (name == "block3") return NetLayer::Block3;
        if (name == "gap") return NetLayer::Gap;
        if (name == "fc1") return NetLayer::Fc1;
        std::string valid;
        for (const auto& n : layer_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw InvalidArgument("unknown layer '" + std::string(name) + "'; valid layers: " + valid);
    }

private:
    struct Trace {
        std::vector<float> input;                        // normalized, channel-first
        std::array<std::vector<float>, 3> conv_out;      // post-ReLU
        std::array<std::vector<float>, 3> pooled;
        std::array<std::vector<std::uint32_t>, 3> argmax;
        std::vector<float> gap, fc1_pre, fc1, logits;

        std::vector<float>& at(NetLayer l) {
            switch (l) {
                case NetLayer::Block1: return pooled[0];
                case NetLayer::Block2: return pooled[1];
                case NetLayer::Block3: return pooled[2];
                case NetLayer::Gap: return gap;
                case NetLayer::Fc1: return fc1;
                default: return logits;
            }
        }
    };

    void check_input(const VideoTensor& v) const {
        if (v.extent() != input_ || v.channels() != channels_)
            throw InvalidArgument("input dims " + to_string(v.extent()) + "x" + std::to_string(v.channels()) +
                                  " do not match model input " + to_string(input_) + "x" + std::to_string(channels_));
    }

    Extent block_extent(std::size_t b) const {
        return {input_.t >> b, input_.h >> b, input_.w >> b};
    }

    Trace forward(const VideoTensor& video, NetLayer stop) const {
        Trace tr;
        const std::size_t V = input_.voxels();
        tr.input.resize(V * channels_);
        auto src = video.data();
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t c = 0; c < channels_; ++c) tr.input[c * V + v] = src[v * channels_ + c] - input_mean_[c];

        const std::vector<float>* x = &tr.input;
        for (std::size_t b = 0; b < 3; ++b) {
            const Extent e = block_extent(b);
            const auto& L = conv_[b];
            tr.conv_out[b].resize(L.out_ch * e.voxels());
            kernels::conv3d_forward(x->data(), L.in_ch, e, L, tr.conv_out[b].data());
            for (auto& a : tr.conv_out[b]) a = std::max(a, 0.0f);
            const std::size_t pooled = L.out_ch * e.voxels() / 8;
            tr.pooled[b].resize(pooled);
            tr.argmax[b].resize(pooled);
            kernels::maxpool2_forward(tr.conv_out[b].data(), L.out_ch, e, tr.pooled[b].data(), tr.argmax[b].data());
            x = &tr.pooled[b];
            if (stop == static_cast<NetLayer>(b)) return tr;
        }

        const std::size_t C3 = conv_[2].out_ch;
        const std::size_t n = tr.pooled[2].size() / C3;
        tr.gap.resize(C3);
        for (std::size_t c = 0; c < C3; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += tr.pooled[2][c * n + i];
            tr.gap[c] = static_cast<float>(s / static_cast<double>(n));
        }
        if (stop == NetLayer::Gap) return tr;

        tr.fc1_pre.resize(fc1_.out);
        kernels::dense_forward(fc1_, tr.gap.data(), tr.fc1_pre.data());
        tr.fc1.resize(fc1_.out);
        for (std::size_t i = 0; i < fc1_.out; ++i) tr.fc1[i] = std::max(tr.fc1_pre[i], 0.0f);
        if (stop == NetLayer::Fc1) return tr;

        tr.logits.resize(fc2_.out);
        kernels::dense_forward(fc2_, tr.fc1.data(), tr.logits.data());
        return tr;
    }

    /// Backpropagates `dlogits` down to the output of `stop` and returns the
    /// gradient there. With `grads`, accumulates parameter gradients on the way
    /// (slot order as in parameters()).
    std::vector<float> backward(const Trace& tr, const std::vector<float>& dlogits, NetLayer stop,
                                ParamGrads* grads) const {
        auto dense_back = [&](const DenseLayer& L, const std::vector<float>& x, const std::vector<float>& dy,
                              std::size_t slot) {
            if (grads) {
                auto& dW = (*grads)[slot];
                auto& db = (*grads)[slot + 1];
                for (std::size_t o = 0; o < L.out; ++o) {
                    db[o] += dy[o];
                    for (std::size_t i = 0; i < L.in; ++i) dW[o * L.in + i] += dy[o] * x[i];
                }
            }
            std::vector<float> dx(L.in, 0.0f);
            for (std::size_t o = 0; o < L.out; ++o)
                for (std::size_t i = 0; i < L.in; ++i) dx[i] += L.weight[o * L.in + i] * dy[o];
            return dx;
        };

        std::vector<float> dfc1 = dense_back(fc2_, tr.fc1, dlogits, 9);
        if (stop == NetLayer::Fc1) return dfc1;
        for (std::size_t i = 0; i < dfc1.size(); ++i)
            if (!(tr.fc1_pre[i] > 0.0f)) dfc1[i] = 0.0f;
        std::vector<float> dgap = dense_back(fc1_, tr.gap, dfc1, 7);
        if (stop == NetLayer::Gap) return dgap;

        const std::size_t C3 = conv_[2].out_ch;
        const std::size_t n = tr.pooled[2].size() / C3;
        std::vector<float> dpooled(tr.pooled[2].size());
        for (std::size_t c = 0; c < C3; ++c)
            std::fill_n(dpooled.begin() + static_cast<std::ptrdiff_t>(c * n), n, dgap[c] / static_cast<float>(n));

        for (std::size_t bb = 3; bb-- > 0;) {
            if (stop == static_cast<NetLayer>(bb)) return dpooled;
            const Extent e = block_extent(bb);
            const auto& L = conv_[bb];
            std::vector<float> dconv(tr.conv_out[bb].size(), 0.0f);
            for (std::size_t i = 0; i < dpooled.size(); ++i) dconv[tr.argmax[bb][i]] += dpooled[i];
            for (std::size_t i = 0; i < dconv.size(); ++i)
                if (!(tr.conv_out[bb][i] > 0.0f)) dconv[i] = 0.0f;
            const std::vector<float>& x = bb == 0 ? tr.input : tr.pooled[bb - 1];
            std::vector<float> dx;
            if (bb > 0) dx.assign(x.size(), 0.0f);
            kernels::conv3d_backward(x.data(), L.in_ch, e, L, dconv.data(), grads ? (*grads)[1 + 2 * bb].data() : nullptr,
                                     grads ? (*grads)[2 + 2 * bb].data() : nullptr, bb > 0 ? dx.data() : nullptr);
            dpooled = std::move(dx);
        }
        return {};
    }

    int classes_;
    Extent input_;
    std::size_t channels_;
    std::vector<float> input_mean_;
    std::array<Conv3dLayer, 3> conv_;
    DenseLayer fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    std::size_t epochs = 20;
    double lr = 0.01;
    std::size_t batch = 8;
    double momentum = 0.9;
    std::uint64_t seed = 0;
};

struct TrainResult {
    BuiltinNet net;
    std::vector<double> epoch_loss;  // mean training loss per epoch
};

/// Mini-batch SGD with momentum on softmax cross-entropy. Fully deterministic
/// for a given seed; throws TrainingDiverged on a non-finite loss.
inline TrainResult train_model(const LabeledDataset& ds, const TrainOptions& opt, Extent input = {16, 32, 32}) {
    const auto train = ds.indices(Split::Train);
    detail::require(!train.empty(), "train_model: empty train split");
    detail::require(opt.lr > 0.0, "train_model: lr must be > 0");
    detail::require(opt.batch >= 1 && opt.epochs >= 1, "train_model: batch and epochs must be >= 1");

    const std::size_t channels = ds.items[train.front()].video.channels();
    TrainResult res{BuiltinNet(ds.num_classes, input, channels), {}};
    BuiltinNet& net = res.net;
    net.init_weights(opt.seed);
    net.set_input_mean(dataset_mean(ds));

    std::vector<VideoTensor> inputs;
    inputs.reserve(train.size());
    for (auto i : train) inputs.push_back(net.to_input(ds.items[i].video));

    auto params = net.parameters();
    ParamGrads velocity = net.zero_grads();
    std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += opt.batch, ++step) {
            const std::size_t end = std::min(order.size(), start + opt.batch);
            ParamGrads grads = net.zero_grads();
            double loss = 0.0;
            for (std::size_t k = start; k < end; ++k)
                loss += net.accumulate_gradients(inputs[order[k]], ds.items[train[order[k]]].label, grads);
            if (!std::isfinite(loss)) throw TrainingDiverged(step);
            epoch_loss += loss;
            const float scale = 1.0f / static_cast<float>(end - start);
            for (std::size_t p = 1; p < params.size(); ++p) {
                auto& w = *params[p].second;
                auto& vel = velocity[p];
                const auto& g = grads[p];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    vel[i] = static_cast<float>(opt.momentum) * vel[i] - static_cast<float>(opt.lr) * g[i] * scale;
                    w[i] += vel[i];
                }
                for (float x : w)
                    if (!std::isfinite(x)) throw TrainingDiverged(step);
            }
        }
        res.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return res;
}

// ---------------------------------------------------------------------------
// STN1 model file:
//   "STN1" | u32 Y | u32 T,H,W,C | u32 n_tensors
//   | per tensor: u32 name_len, name, u32 rank, u32 dims[rank]
//   | payload: every tensor's f32 values in table order, little-endian.

inline std::vector<std::uint8_t> encode_stn1(const BuiltinNet& net) {
    std::vector<std::uint8_t> out;
    binary::put_bytes(out, "STN1");
    binary::put_u32(out, static_cast<std::uint32_t>(net.num_classes()));
    const auto e = net.input_extent();
    for (auto d : {e.t, e.h, e.w, net.input_channels()}) binary::put_u32(out, static_cast<std::uint32_t>(d));
    const auto shapes = net.parameter_shapes();
    binary::put_u32(out, static_cast<std::uint32_t>(shapes.size()));
    for (const auto& [name, dims] : shapes) {
        binary::put_u32(out, static_cast<std::uint32_t>(name.size()));
        binary::put_bytes(out, name);
        binary::put_u32(out, static_cast<std::uint32_t>(dims.size()));
        for (auto d : dims) binary::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (auto& [name, p] : const_cast<BuiltinNet&>(net).parameters())
        for (float v : *p) binary::put_f32(out, v);
    return out;
}

/// Parses a complete model; any malformed or truncated input throws before a
/// model is returned.
inline BuiltinNet decode_stn1(std::span<const std::uint8_t> bytes) {
    binary::Reader r(bytes);
    if (r.remaining() < 4) throw ParseError(ParseError::Kind::Truncated, "file shorter than magic");
    if (auto m = r.str(4); m != "STN1") throw ParseError(ParseError::Kind::BadMagic, "bad magic '" + m + "', expected 'STN1'");
    const auto classes = r.u32();
    std::uint32_t dims[4];
    for (auto& d : dims) d = r.u32();
    if (classes < 2 || classes > 1u << 20) throw ParseError(ParseError::Kind::ShapeMismatch, "implausible class count");
    if (dims[3] == 0 || dims[3] > 1024) throw ParseError(ParseError::Kind::ShapeMismatch, "implausible channel count");
    for (int i = 0; i < 3; ++i)
        if (dims[i] == 0 || dims[i] % 8 != 0 || dims[i] > 4096)
            throw ParseError(ParseError::Kind::ShapeMismatch, "input dims must be positive multiples of 8");

    BuiltinNet net(static_cast<int>(classes), {dims[0], dims[1], dims[2]}, dims[3]);
    const auto expected = net.parameter_shapes();
    const auto n = r.u32();
    if (n != expected.size()) throw ParseError(ParseError::Kind::ShapeMismatch, "unexpected parameter count");
    for (const auto& [name, shape] : expected) {
        const auto len = r.u32();
        if (len > 256) throw ParseError(ParseError::Kind::ShapeMismatch, "parameter name too long");
        const auto got = r.str(len);
        const auto rank = r.u32();
        if (got != name || rank != shape.size())
            throw ParseError(ParseError::Kind::ShapeMismatch, "parameter '" + got + "' does not match expected '" + name + "'");
        for (auto d : shape)
            if (r.u32() != d) throw ParseError(ParseError::Kind::ShapeMismatch, "shape mismatch for '" + name + "'");
    }
    for (auto& [name, p] : net.parameters())
        for (auto& v : *p) v = r.f32();
    if (r.remaining() != 0) throw ParseError(ParseError::Kind::Syntax, "trailing bytes after STN1 payload");
    return net;
}

inline void save_model(const std::string& path, const BuiltinNet& net) { binary::write_file(path, encode_stn1(net)); }
inline BuiltinNet load_model(const std::string& path) { return decode_stn1(binary::read_file(path)); }

// ---------------------------------------------------------------------------
// Offline exchange: precomputed activations/gradients of an external model,
// stored as STV1 tensors `<videoid>.<layer>.act.stv1` and
// `<videoid>.<layer>.grad<y>.stv1`. Vectors are stored as 1x1xNx1 tensors.

class OfflineBackend {
public:
    explicit OfflineBackend(std::string dir) : dir_(std::move(dir)) {}

    std::vector<float> activations(const std::string& video_id, const std::string& layer) const {
        return load(video_id + "." + layer + ".act.stv1");
    }

    std::vector<float> gradient(const std::string& video_id, const std::string& layer, int y) const {
        return load(video_id + "." + layer + ".grad" + std::to_string(y) + ".stv1");
    }

    static void write_vector(const std::string& path, std::span<const float> v) {
        write_tensor(path, VideoTensor({1, 1, v.size()}, 1, std::vector<float>(v.begin(), v.end())));
    }

    /// Exports a backend's activations and per-class gradients for `videos`.
    static void export_from(const ModelBackend& model, const std::vector<std::pair<std::string, VideoTensor>>& videos,
                            const std::string& layer, const std::string& dir) {
        std::filesystem::create_directories(dir);
        for (const auto& [id, video] : videos) {
            const auto in = model.to_input(video);
            write_vector(dir + "/" + id + "." + layer + ".act.stv1", model.activations(in, layer));
            for (int y = 0; y < model.num_classes(); ++y)
                write_vector(dir + "/" + id + "." + layer + ".grad" + std::to_string(y) + ".stv1",
                             model.grad_logit_wrt_activations(in, y, layer));
        }
    }

private:
    std::vector<float> load(const std::string& name) const {
        const auto t = read_tensor(dir_ + "/" + name);
        return {t.data().begin(), t.data().end()};
    }

    std::string dir_;
};

}  // namespace stace
