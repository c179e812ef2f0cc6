#pragma once

/// @file segmodel.hpp
/// Small encoder/decoder segmentation network, the source/target/memory
/// triplet, EMA update and checkpoint files.
///
/// The encoder is four 3x3 conv blocks, ReLU after the first three; the last
/// block's linear output is the feature map used for prototypes. A 1x1 conv head maps features to class
/// logits at feature resolution, which are bilinearly upsampled
/// (half-pixel centers) to the input resolution.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "iapc/common.hpp"
#include "iapc/prob.hpp"

namespace iapc {

struct ArchDescriptor {
    int in_channels = 3;
    int base_width = 16;    // channels of the first block
    int feature_dim = 32;   // D
    int feature_stride = 4; // s, one of 1, 2, 4, 8
    int num_classes = 5;    // C

    void validate() const {
        if (in_channels < 1 || base_width < 1 || feature_dim < 1) {
            throw ParameterError("architecture: channel counts must be positive");
        }
        if (feature_stride != 1 && feature_stride != 2 && feature_stride != 4 && feature_stride != 8) {
            throw ParameterError("architecture: feature_stride must be 1, 2, 4 or 8");
        }
        if (num_classes < 2 || num_classes >= kMaxClasses) {
            throw ParameterError("architecture: num_classes must be in [2, 254]");
        }
    }

    /// Spatial size of the feature map for an input extent.
    int feature_extent(int input_extent) const noexcept {
        return (input_extent + feature_stride - 1) / feature_stride;
    }

    bool operator==(const ArchDescriptor&) const = default;
};

template <std::floating_point T>
struct ParamTensor {
    std::string name;
    std::vector<int> shape;
    AlignedVector<T> values;
};

/// Gradient buffers aligned with a model's parameter list.
template <std::floating_point T>
using ParamGrads = std::vector<AlignedVector<T>>;

template <std::floating_point T>
struct ForwardResult {
    FeatureMap<T> features;     // h x w x D
    LogitMap<T> logits_feat;    // h x w x C, head output before upsampling
    LogitMap<T> logits;         // H x W x C
};

namespace model_detail {

struct ConvShape {
    int cin;
    int cout;
    int kernel;
    int stride;
    int pad;
    bool relu;
};

inline int conv_out(int in, const ConvShape& c) noexcept { return (in + 2 * c.pad - c.kernel) / c.stride + 1; }

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Column-major (K x P) patch matrix with K ordered (ky, kx, cin).
template <typename T>
void im2col(const Tensor3<T>& in, const ConvShape& c, int out_h, int out_w, AlignedVector<T>& col) {
    const int K = c.kernel * c.kernel * c.cin;
    col.assign(static_cast<std::size_t>(K) * out_h * out_w, T{});
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            T* dst = col.data() + static_cast<std::size_t>(oy * out_w + ox) * K;
            for (int ky = 0; ky < c.kernel; ++ky) {
                const int iy = oy * c.stride - c.pad + ky;
                if (iy < 0 || iy >= in.height()) continue;
                for (int kx = 0; kx < c.kernel; ++kx) {
                    const int ix = ox * c.stride - c.pad + kx;
                    if (ix < 0 || ix >= in.width()) continue;
                    std::memcpy(dst + (ky * c.kernel + kx) * c.cin, in.pixel(iy, ix).data(),
                                sizeof(T) * static_cast<std::size_t>(c.cin));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvShape& c, int out_h, int out_w, Tensor3<T>& grad_in) {
    const int K = c.kernel * c.kernel * c.cin;
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            const T* src = col + static_cast<std::size_t>(oy * out_w + ox) * K;
            for (int ky = 0; ky < c.kernel; ++ky) {
                const int iy = oy * c.stride - c.pad + ky;
                if (iy < 0 || iy >= grad_in.height()) continue;
                for (int kx = 0; kx < c.kernel; ++kx) {
                    const int ix = ox * c.stride - c.pad + kx;
                    if (ix < 0 || ix >= grad_in.width()) continue;
                    T* dst = grad_in.pixel(iy, ix).data();
                    const T* s = src + (ky * c.kernel + kx) * c.cin;
                    for (int ci = 0; ci < c.cin; ++ci) dst[ci] += s[ci];
                }
            }
        }
    }
}

/// Source taps for 1-D linear resampling with half-pixel centers.
template <typename T>
struct Interp1D {
    std::vector<int> lo;
    std::vector<int> hi;
    std::vector<T> frac;

    Interp1D(int in, int out) : lo(static_cast<std::size_t>(out)), hi(lo.size()), frac(lo.size()) {
        const double scale = static_cast<double>(in) / out;
        for (int i = 0; i < out; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            int i0 = static_cast<int>(src);
            if (i0 > in - 1) i0 = in - 1;
            const int i1 = std::min(i0 + 1, in - 1);
            lo[static_cast<std::size_t>(i)] = i0;
            hi[static_cast<std::size_t>(i)] = i1;
            frac[static_cast<std::size_t>(i)] = static_cast<T>(src - i0);
        }
    }
};

}  // namespace model_detail

/// Bilinear resize of a multi-channel map (half-pixel centers, edge clamped).
template <std::floating_point T>
Tensor3<T> upsample_bilinear(const Tensor3<T>& in, int out_h, int out_w) {
    const model_detail::Interp1D<T> ry(in.height(), out_h), rx(in.width(), out_w);
    Tensor3<T> out(out_h, out_w, in.channels());
    const int C = in.channels();
    for (int y = 0; y < out_h; ++y) {
        const auto yi = static_cast<std::size_t>(y);
        const T wy = ry.frac[yi];
        for (int x = 0; x < out_w; ++x) {
            const auto xi = static_cast<std::size_t>(x);
            const T wx = rx.frac[xi];
            const T* a = in.pixel(ry.lo[yi], rx.lo[xi]).data();
            const T* b = in.pixel(ry.lo[yi], rx.hi[xi]).data();
            const T* c = in.pixel(ry.hi[yi], rx.lo[xi]).data();
            const T* d = in.pixel(ry.hi[yi], rx.hi[xi]).data();
            T* o = out.pixel(y, x).data();
            for (int k = 0; k < C; ++k) {
                o[k] = (1 - wy) * ((1 - wx) * a[k] + wx * b[k]) + wy * ((1 - wx) * c[k] + wx * d[k]);
            }
        }
    }
    return out;
}

/// Adjoint of upsample_bilinear.
template <std::floating_point T>
Tensor3<T> upsample_bilinear_backward(const Tensor3<T>& grad_out, int in_h, int in_w) {
    const model_detail::Interp1D<T> ry(in_h, grad_out.height()), rx(in_w, grad_out.width());
    Tensor3<T> grad_in(in_h, in_w, grad_out.channels());
    const int C = grad_out.channels();
    for (int y = 0; y < grad_out.height(); ++y) {
        const auto yi = static_cast<std::size_t>(y);
        const T wy = ry.frac[yi];
        for (int x = 0; x < grad_out.width(); ++x) {
            const auto xi = static_cast<std::size_t>(x);
            const T wx = rx.frac[xi];
            const T* g = grad_out.pixel(y, x).data();
            T* a = grad_in.pixel(ry.lo[yi], rx.lo[xi]).data();
            T* b = grad_in.pixel(ry.lo[yi], rx.hi[xi]).data();
            T* c = grad_in.pixel(ry.hi[yi], rx.lo[xi]).data();
            T* d = grad_in.pixel(ry.hi[yi], rx.hi[xi]).data();
            for (int k = 0; k < C; ++k) {
                a[k] += (1 - wy) * (1 - wx) * g[k];
                b[k] += (1 - wy) * wx * g[k];
                c[k] += wy * (1 - wx) * g[k];
                d[k] += wy * wx * g[k];
            }
        }
    }
    return grad_in;
}

/// Intermediate values kept by forward() for backward().
template <std::floating_point T>
struct ForwardCache {
    struct Layer {
        AlignedVector<T> col;
        Tensor3<T> output;
    };
    std::vector<Layer> layers;  // encoder blocks then head
    int image_height = 0;
    int image_width = 0;
};

template <std::floating_point T>
class SegmentationModel {
public:
    static constexpr int kBlocks = 4;

    SegmentationModel() = default;

    /// All parameters zero.
    explicit SegmentationModel(const ArchDescriptor& arch) : arch_(arch) {
        arch_.validate();
        for (int i = 0; i < kBlocks; ++i) {
            const auto c = shapes()[static_cast<std::size_t>(i)];
            add_param("block" + std::to_string(i + 1) + ".weight", {c.cout, c.kernel, c.kernel, c.cin});
            add_param("block" + std::to_string(i + 1) + ".bias", {c.cout});
        }
        add_param("head.weight", {arch_.num_classes, 1, 1, arch_.feature_dim});
        add_param("head.bias", {arch_.num_classes});
    }

    /// He-normal encoder weights, scaled-normal head, zero biases.
    static SegmentationModel initialized(const ArchDescriptor& arch, std::uint64_t seed) {
        SegmentationModel m(arch);
        std::mt19937_64 rng(seed);
        const auto convs = m.shapes();
        for (std::size_t i = 0; i < convs.size(); ++i) {
            const auto& c = convs[i];
            const double fan_in = static_cast<double>(c.kernel * c.kernel * c.cin);
            const double std_dev = c.relu ? std::sqrt(2.0 / fan_in) : std::sqrt(1.0 / fan_in);
            std::normal_distribution<double> dist(0.0, std_dev);
            for (auto& w : m.params_[2 * i].values) w = static_cast<T>(dist(rng));
        }
        return m;
    }

    const ArchDescriptor& arch() const noexcept { return arch_; }
    std::vector<ParamTensor<T>>& params() noexcept { return params_; }
    const std::vector<ParamTensor<T>>& params() const noexcept { return params_; }

    std::size_t parameter_count() const noexcept {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.values.size();
        return n;
    }

    void zero_head() {
        for (auto& p : params_) {
            if (p.name.rfind("head.", 0) == 0) std::fill(p.values.begin(), p.values.end(), T{});
        }
    }

    ParamGrads<T> zero_grads() const {
        ParamGrads<T> g;
        for (const auto& p : params_) g.emplace_back(p.values.size(), T{});
        return g;
    }

    std::uint64_t parameter_hash() const {
        Fnv1a h;
        for (const auto& p : params_) {
            h.update(p.name);
            h.update_values(std::span<const T>(p.values));
        }
        return h.digest();
    }

    bool operator==(const SegmentationModel& o) const {
        if (!(arch_ == o.arch_) || params_.size() != o.params_.size()) return false;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name != o.params_[i].name || params_[i].values != o.params_[i].values) return false;
        }
        return true;
    }

    ForwardResult<T> forward(const Image& image, ForwardCache<T>* cache = nullptr) const {
        if (image.channels() != arch_.in_channels) {
            throw ParameterError("forward: image has " + std::to_string(image.channels()) + " channels, model expects " +
                                 std::to_string(arch_.in_channels));
        }
        if (image.height() < 1 || image.width() < 1) {
            throw ParameterError("forward: empty image");
        }
        ForwardCache<T> local;
        ForwardCache<T>& fc = cache ? *cache : local;
        fc.layers.assign(kBlocks + 1, {});
        fc.image_height = image.height();
        fc.image_width = image.width();

        Tensor3<T> x = tensor_cast<T>(image);
        const auto convs = shapes();
        for (int i = 0; i < kBlocks; ++i) {
            auto& layer = fc.layers[static_cast<std::size_t>(i)];
            layer.output = conv_forward(x, convs[static_cast<std::size_t>(i)], params_[2 * i].values,
                                        params_[2 * i + 1].values, layer.col);
            x = layer.output;
        }
        ForwardResult<T> out;
        out.features = x;
        auto& head = fc.layers[kBlocks];
        head.output = conv_forward(x, convs[kBlocks], params_[2 * kBlocks].values, params_[2 * kBlocks + 1].values,
                                   head.col);
        out.logits_feat = head.output;
        out.logits = upsample_bilinear(out.logits_feat, image.height(), image.width());
        return out;
    }

    /// Accumulates parameter gradients into `grads`. Any gradient argument may
    /// be null; the full-resolution logit gradient is pushed through the
    /// upsampling adjoint and added to the feature-resolution one.
    void backward(const ForwardCache<T>& fc, const LogitMap<T>* grad_logits, const LogitMap<T>* grad_logits_feat,
                  const FeatureMap<T>* grad_features, ParamGrads<T>& grads) const {
        if (fc.layers.size() != kBlocks + 1) throw ParameterError("backward: cache is empty");
        if (grads.size() != params_.size()) throw ParameterError("backward: gradient buffer mismatch");
        const auto convs = shapes();
        const Tensor3<T>& feats = fc.layers[kBlocks - 1].output;

        Tensor3<T> g_head(feats.height(), feats.width(), arch_.num_classes);
        if (grad_logits) {
            if (grad_logits->height() != fc.image_height || grad_logits->width() != fc.image_width ||
                grad_logits->channels() != arch_.num_classes) {
                throw ParameterError("backward: logit gradient shape mismatch");
            }
            g_head = upsample_bilinear_backward(*grad_logits, feats.height(), feats.width());
        }
        if (grad_logits_feat) {
            if (!grad_logits_feat->same_shape(g_head)) throw ParameterError("backward: feature-logit gradient shape");
            for (std::size_t i = 0; i < g_head.size(); ++i) g_head.data()[i] += grad_logits_feat->data()[i];
        }

        Tensor3<T> g = head_backward(feats, convs[kBlocks], g_head, grads);
        if (grad_features) {
            if (!grad_features->same_shape(g)) throw ParameterError("backward: feature gradient shape mismatch");
            for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += grad_features->data()[i];
        }
        for (int i = kBlocks - 1; i >= 0; --i) {
            const auto& layer = fc.layers[static_cast<std::size_t>(i)];
            const int in_h = i == 0 ? fc.image_height : fc.layers[static_cast<std::size_t>(i - 1)].output.height();
            const int in_w = i == 0 ? fc.image_width : fc.layers[static_cast<std::size_t>(i - 1)].output.width();
            g = conv_backward_sized(in_h, in_w, layer, convs[static_cast<std::size_t>(i)], g, i, grads, i > 0);
        }
    }

private:
    std::vector<model_detail::ConvShape> shapes() const {
        const int n2 = arch_.feature_stride == 1 ? 0
                       : arch_.feature_stride == 2 ? 1
                       : arch_.feature_stride == 4 ? 2
                                                   : 3;
        std::vector<model_detail::ConvShape> s;
        int cin = arch_.in_channels;
        for (int i = 0; i < kBlocks; ++i) {
            const int cout = i == 0 ? arch_.base_width : arch_.feature_dim;
            const int stride = (i >= 1 && i <= n2) ? 2 : 1;
            // The last block has no ReLU: signed features keep the
            // dot-product similarities to prototypes informative.
            s.push_back({cin, cout, 3, stride, 1, i + 1 < kBlocks});
            cin = cout;
        }
        s.push_back({arch_.feature_dim, arch_.num_classes, 1, 1, 0, false});
        return s;
    }

    void add_param(std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        params_.push_back({std::move(name), std::move(shape), AlignedVector<T>(n, T{})});
    }

    static Tensor3<T> conv_forward(const Tensor3<T>& in, const model_detail::ConvShape& c, const AlignedVector<T>& w,
                                   const AlignedVector<T>& b, AlignedVector<T>& col) {
        using namespace model_detail;
        const int oh = conv_out(in.height(), c), ow = conv_out(in.width(), c);
        const int K = c.kernel * c.kernel * c.cin;
        const int P = oh * ow;
        Tensor3<T> out(oh, ow, c.cout);
        Eigen::Map<const RowMatrixX<T>> W(w.data(), c.cout, K);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data(), c.cout);
        Eigen::Map<MatrixX<T>> Y(out.data(), c.cout, P);
        if (c.kernel == 1 && c.stride == 1 && c.pad == 0) {
            col.clear();
            Eigen::Map<const MatrixX<T>> X(in.data(), K, P);
            Y.noalias() = W * X;
        } else {
            im2col(in, c, oh, ow, col);
            Eigen::Map<const MatrixX<T>> X(col.data(), K, P);
            Y.noalias() = W * X;
        }
        Y.colwise() += bias;
        if (c.relu) Y = Y.cwiseMax(T{});
        return out;
    }

    // The 1x1 head reads the feature map directly and keeps no patch matrix.
    Tensor3<T> head_backward(const Tensor3<T>& input, const model_detail::ConvShape& c, const Tensor3<T>& grad_out,
                             ParamGrads<T>& grads) const {
        constexpr int index = kBlocks;
        using namespace model_detail;
        const int P = grad_out.pixels();
        const int K = c.cin;
        Eigen::Map<const RowMatrixX<T>> W(params_[2 * static_cast<std::size_t>(index)].values.data(), c.cout, K);
        Eigen::Map<const MatrixX<T>> dY(grad_out.data(), c.cout, P);
        Eigen::Map<const MatrixX<T>> X(input.data(), K, P);
        Eigen::Map<RowMatrixX<T>> dW(grads[2 * static_cast<std::size_t>(index)].data(), c.cout, K);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grads[2 * static_cast<std::size_t>(index) + 1].data(),
                                                           c.cout);
        dW.noalias() += dY * X.transpose();
        db += dY.rowwise().sum();
        Tensor3<T> grad_in(input.height(), input.width(), c.cin);
        Eigen::Map<MatrixX<T>> dX(grad_in.data(), K, P);
        dX.noalias() = W.transpose() * dY;
        return grad_in;
    }

    Tensor3<T> conv_backward_sized(int in_h, int in_w, const typename ForwardCache<T>::Layer& layer,
                                   const model_detail::ConvShape& c, const Tensor3<T>& grad_out, int index,
                                   ParamGrads<T>& grads, bool need_input_grad) const {
        using namespace model_detail;
        const int oh = layer.output.height(), ow = layer.output.width();
        const int P = oh * ow;
        const int K = c.kernel * c.kernel * c.cin;
        if (!grad_out.same_shape(layer.output)) throw ParameterError("backward: gradient shape mismatch");
        MatrixX<T> dY = Eigen::Map<const MatrixX<T>>(grad_out.data(), c.cout, P);
        if (c.relu) {
            Eigen::Map<const MatrixX<T>> Y(layer.output.data(), c.cout, P);
            dY = (Y.array() > T{}).select(dY, T{});
        }
        Eigen::Map<const RowMatrixX<T>> W(params_[2 * static_cast<std::size_t>(index)].values.data(), c.cout, K);
        Eigen::Map<const MatrixX<T>> X(layer.col.data(), K, P);
        Eigen::Map<RowMatrixX<T>> dW(grads[2 * static_cast<std::size_t>(index)].data(), c.cout, K);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grads[2 * static_cast<std::size_t>(index) + 1].data(),
                                                           c.cout);
        dW.noalias() += dY * X.transpose();
        db += dY.rowwise().sum();
        Tensor3<T> grad_in(in_h, in_w, c.cin);
        if (need_input_grad) {
            MatrixX<T> dcol = W.transpose() * dY;
            col2im_add(dcol.data(), c, oh, ow, grad_in);
        }
        return grad_in;
    }

    ArchDescriptor arch_;
    std::vector<ParamTensor<T>> params_;
};

using Model = SegmentationModel<float>;

/// Features and full-resolution logits of one image.
template <std::floating_point T>
std::pair<FeatureMap<T>, LogitMap<T>> forward(const SegmentationModel<T>& model, const Image& image) {
    auto r = model.forward(image);
    return {std::move(r.features), std::move(r.logits)};
}

/// memory <- memory + alpha * (target - memory), clamped elementwise to the
/// interval spanned by the two operands. alpha = 1 copies the target.
template <std::floating_point T>
void ema_update(SegmentationModel<T>& memory, const SegmentationModel<T>& target, double alpha) {
    if (!(memory.arch() == target.arch())) throw ParameterError("ema_update: architecture mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("ema_update: alpha must lie in [0,1]");
    auto& mp = memory.params();
    const auto& tp = target.params();
    if (mp.size() != tp.size()) throw ParameterError("ema_update: parameter list mismatch");
    if (alpha == 0.0) return;
    const T a = static_cast<T>(alpha);
    for (std::size_t i = 0; i < mp.size(); ++i) {
        auto& m = mp[i].values;
        const auto& t = tp[i].values;
        if (m.size() != t.size()) throw ParameterError("ema_update: parameter size mismatch");
        if (alpha == 1.0) {
            m = t;
            continue;
        }
        for (std::size_t k = 0; k < m.size(); ++k) {
            const T lo = std::min(m[k], t[k]), hi = std::max(m[k], t[k]);
            m[k] = std::clamp(m[k] + a * (t[k] - m[k]), lo, hi);
        }
    }
}

/// Frozen source, trainable target and EMA memory sharing one architecture.
template <std::floating_point T>
class ModelTriplet {
public:
    /// Target and memory start as exact copies of the source.
    explicit ModelTriplet(SegmentationModel<T> source)
        : source_(std::move(source)), target_(source_), memory_(source_) {}

    const SegmentationModel<T>& source() const noexcept { return source_; }
    SegmentationModel<T>& target() noexcept { return target_; }
    const SegmentationModel<T>& target() const noexcept { return target_; }
    SegmentationModel<T>& memory() noexcept { return memory_; }
    const SegmentationModel<T>& memory() const noexcept { return memory_; }

private:
    SegmentationModel<T> source_;
    SegmentationModel<T> target_;
    SegmentationModel<T> memory_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian binary:
//   char[8]  magic "IAPCCKPT"
//   u32      format version (1)
//   u32      scalar width in bytes (4 = float32, 8 = float64)
//   i32 x5   in_channels, base_width, feature_dim, feature_stride, num_classes
//   u64      training step
//   u64      config hash
//   u32      parameter count
//   per parameter: u32 name length, name bytes, u32 rank, i32 dims[rank],
//                  values (product(dims) scalars)

inline constexpr char kCheckpointMagic[8] = {'I', 'A', 'P', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <std::floating_point T>
struct Checkpoint {
    SegmentationModel<T> model;
    std::uint64_t step = 0;
    std::uint64_t config_hash = 0;
};

namespace ckpt_detail {

template <typename V>
void put(std::ostream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::string& what) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw LoadError("checkpoint truncated while reading " + what);
    return v;
}

}  // namespace ckpt_detail

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const SegmentationModel<T>& model, std::uint64_t step = 0,
                     std::uint64_t config_hash = 0) {
    using namespace ckpt_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, sizeof(T));
    const auto& a = model.arch();
    for (int v : {a.in_channels, a.base_width, a.feature_dim, a.feature_stride, a.num_classes}) put<std::int32_t>(out, v);
    put<std::uint64_t>(out, step);
    put<std::uint64_t>(out, config_hash);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.params().size()));
    for (const auto& p : model.params()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
        for (int d : p.shape) put<std::int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(p.values.data()),
                  static_cast<std::streamsize>(p.values.size() * sizeof(T)));
    }
    if (!out) throw Error("error writing checkpoint " + path.string());
}

/// Reads a checkpoint, converting the stored scalar width to T if needed.
template <std::floating_point T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    using namespace ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw LoadError(path.string() + " is not a checkpoint (bad magic)");
    }
    const auto version = get<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
    const auto width = get<std::uint32_t>(in, "scalar width");
    if (width != 4 && width != 8) throw LoadError("unsupported scalar width " + std::to_string(width));
    ArchDescriptor a;
    a.in_channels = get<std::int32_t>(in, "descriptor");
    a.base_width = get<std::int32_t>(in, "descriptor");
    a.feature_dim = get<std::int32_t>(in, "descriptor");
    a.feature_stride = get<std::int32_t>(in, "descriptor");
    a.num_classes = get<std::int32_t>(in, "descriptor");
    Checkpoint<T> ck{SegmentationModel<T>(a), 0, 0};
    ck.step = get<std::uint64_t>(in, "step");
    ck.config_hash = get<std::uint64_t>(in, "config hash");
    const auto count = get<std::uint32_t>(in, "parameter count");
    auto& params = ck.model.params();
    if (count != params.size()) throw LoadError("checkpoint parameter count does not match its descriptor");
    for (auto& p : params) {
        const auto len = get<std::uint32_t>(in, "name length");
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (name != p.name) throw LoadError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
        const auto rank = get<std::uint32_t>(in, "rank");
        std::vector<int> shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::int32_t>(in, "shape"));
        if (shape != p.shape) throw LoadError("checkpoint shape mismatch for " + p.name);
        if (width == sizeof(T)) {
            in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * sizeof(T)));
        } else if (width == 4) {
            std::vector<float> tmp(p.values.size());
            in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 4));
            std::transform(tmp.begin(), tmp.end(), p.values.begin(), [](float v) { return static_cast<T>(v); });
        } else {
            std::vector<double> tmp(p.values.size());
            in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 8));
            std::transform(tmp.begin(), tmp.end(), p.values.begin(), [](double v) { return static_cast<T>(v); });
        }
        if (!in) throw LoadError("checkpoint truncated in " + p.name);
    }
    return ck;
}

/// Writes `<stem>.bin` (raw little-endian scalars, H x W x C pixel-major) and
/// `<stem>.json` (shape, dtype, layout, id).
template <std::floating_point T>
void export_tensor(const std::filesystem::path& stem, const Tensor3<T>& t, const std::string& id,
                   const std::string& kind) {
    {
        std::ofstream out(stem.string() + ".bin", std::ios::binary);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
        if (!out) throw Error("cannot write " + stem.string() + ".bin");
    }
    nlohmann::json j = {{"id", id},
                        {"kind", kind},
                        {"shape", {t.height(), t.width(), t.channels()}},
                        {"dtype", sizeof(T) == 4 ? "float32" : "float64"},
                        {"layout", "HWC"}};
    std::ofstream meta(stem.string() + ".json");
    meta << j.dump(2) << '\n';
}

}  // namespace iapc
