#pragma once

/// @file ldsk.hpp
/// Prototype contrast on unlabeled target images: class prototypes from the
/// memory model, the prototype-based reference distribution, and the
/// prototype-symmetric and prototype-enhanced cross-entropy losses.
///
/// Everything here runs at feature resolution (h x w). The target prediction
/// used by the losses is the head output before upsampling.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iapc/common.hpp"
#include "iapc/edik.hpp"
#include "iapc/prob.hpp"

namespace iapc {

/// Per-class feature centroids of one image.
template <std::floating_point T>
struct PrototypeSet {
    int num_classes = 0;
    int dim = 0;
    std::vector<T> vectors;             // num_classes x dim, row-major
    std::vector<std::uint8_t> present;  // 1 if the class owns at least one pixel
    std::string source_image_id;

    PrototypeSet() = default;
    PrototypeSet(int classes, int feature_dim)
        : num_classes(classes),
          dim(feature_dim),
          vectors(static_cast<std::size_t>(classes) * feature_dim, T{}),
          present(static_cast<std::size_t>(classes), 0) {}

    std::span<T> vector(int c) noexcept {
        return {vectors.data() + static_cast<std::size_t>(c) * dim, static_cast<std::size_t>(dim)};
    }
    std::span<const T> vector(int c) const noexcept {
        return {vectors.data() + static_cast<std::size_t>(c) * dim, static_cast<std::size_t>(dim)};
    }
    bool is_present(int c) const noexcept { return present[static_cast<std::size_t>(c)] != 0; }
    int present_count() const noexcept {
        return static_cast<int>(std::count(present.begin(), present.end(), std::uint8_t{1}));
    }

    bool operator==(const PrototypeSet&) const = default;
};

/// Sums features per argmax class; shared by the per-image estimate and the
/// whole-dataset estimate used for static prototypes.
template <std::floating_point T>
class PrototypeAccumulator {
public:
    PrototypeAccumulator(int num_classes, int dim)
        : classes_(num_classes), dim_(dim), sums_(static_cast<std::size_t>(num_classes) * dim, 0.0),
          counts_(static_cast<std::size_t>(num_classes), 0) {}

    void add(const FeatureMap<T>& features, const ProbMap<T>& probs) {
        if (!features.same_grid(probs)) {
            throw ParameterError("prototypes: features and probabilities differ in spatial size");
        }
        if (features.channels() != dim_ || probs.channels() != classes_) {
            throw ParameterError("prototypes: channel count mismatch");
        }
        for (int i = 0; i < features.pixels(); ++i) {
            const int c = argmax(probs.pixel(i));
            const auto f = features.pixel(i);
            double* s = sums_.data() + static_cast<std::size_t>(c) * dim_;
            for (int d = 0; d < dim_; ++d) s[d] += static_cast<double>(f[static_cast<std::size_t>(d)]);
            ++counts_[static_cast<std::size_t>(c)];
        }
    }

    PrototypeSet<T> finish(std::string id = {}) const {
        PrototypeSet<T> out(classes_, dim_);
        out.source_image_id = std::move(id);
        for (int c = 0; c < classes_; ++c) {
            const auto n = counts_[static_cast<std::size_t>(c)];
            if (n == 0) continue;
            out.present[static_cast<std::size_t>(c)] = 1;
            auto v = out.vector(c);
            const double* s = sums_.data() + static_cast<std::size_t>(c) * dim_;
            for (int d = 0; d < dim_; ++d) v[static_cast<std::size_t>(d)] = static_cast<T>(s[d] / static_cast<double>(n));
        }
        return out;
    }

private:
    int classes_;
    int dim_;
    std::vector<double> sums_;
    std::vector<std::int64_t> counts_;
};

/// Mean memory-model feature of every class under the memory model's own
/// argmax labels. `p_m` must be at feature resolution.
template <std::floating_point T>
PrototypeSet<T> estimate_prototypes(const FeatureMap<T>& f_m, const ProbMap<T>& p_m, std::string id = {}) {
    PrototypeAccumulator<T> acc(p_m.channels(), f_m.channels());
    acc.add(f_m, p_m);
    return acc.finish(std::move(id));
}

namespace ldsk_detail {

/// Clamped similarities of one feature vector to the present prototypes.
/// Returns their sum; absent classes get 0.
template <typename T>
T similarities(std::span<const T> f, const PrototypeSet<T>& protos, std::span<T> sim) {
    T total = 0;
    for (int c = 0; c < protos.num_classes; ++c) {
        T s = 0;
        if (protos.is_present(c)) {
            const auto k = protos.vector(c);
            for (int d = 0; d < protos.dim; ++d) s += f[static_cast<std::size_t>(d)] * k[static_cast<std::size_t>(d)];
            s = std::max(s, T{0});
        }
        sim[static_cast<std::size_t>(c)] = s;
        total += s;
    }
    return total;
}

template <typename T>
void check_reference_inputs(const FeatureMap<T>& f_t, const PrototypeSet<T>& protos) {
    if (protos.present_count() == 0) {
        throw PreconditionError("reference_distribution: no class has a prototype");
    }
    if (f_t.channels() != protos.dim) {
        throw ParameterError("reference_distribution: feature dimension differs from prototype dimension");
    }
}

}  // namespace ldsk_detail

/// Normalized feature-prototype similarities.
///
/// p'_c = max(0, <f, k_c>) / sum over present classes. A pixel whose clamped
/// similarities are all zero gets the uniform distribution over present
/// classes; absent classes always get 0.
template <std::floating_point T>
ProbMap<T> reference_distribution(const FeatureMap<T>& f_t, const PrototypeSet<T>& protos) {
    ldsk_detail::check_reference_inputs(f_t, protos);
    const int C = protos.num_classes;
    const T uniform = T{1} / static_cast<T>(protos.present_count());
    ProbMap<T> out(f_t.height(), f_t.width(), C);
    for (int i = 0; i < f_t.pixels(); ++i) {
        auto p = out.pixel(i);
        const T total = ldsk_detail::similarities<T>(f_t.pixel(i), protos, p);
        for (int c = 0; c < C; ++c) {
            auto& v = p[static_cast<std::size_t>(c)];
            if (total > T{0}) {
                v /= total;
            } else {
                v = protos.is_present(c) ? uniform : T{0};
            }
        }
    }
    return out;
}

/// One-hot argmax of the reference distribution.
template <std::floating_point T>
OneHotMap reference_labels(const ProbMap<T>& p_ref) {
    return pseudo_label(p_ref);
}

/// Prototype-symmetric cross-entropy from its four inputs (value only).
///
/// L = -(1/N) sum_pixels [ log(p_t[y'] + eps) + log(p'[y_t] + eps) ].
template <std::floating_point T>
T loss_ps_value(const ProbMap<T>& p_t, const OneHotMap& y_t, const ProbMap<T>& p_ref, const OneHotMap& y_ref) {
    if (!p_t.same_shape(p_ref) || y_t.pixels() != p_t.pixels() || y_ref.pixels() != p_t.pixels()) {
        throw ParameterError("loss_ps: shape mismatch");
    }
    const T eps = kLogEpsilon<T>;
    T total = 0;
    for (int i = 0; i < p_t.pixels(); ++i) {
        total -= std::log(p_t.pixel(i)[static_cast<std::size_t>(y_ref.index(i))] + eps);
        total -= std::log(p_ref.pixel(i)[static_cast<std::size_t>(y_t.index(i))] + eps);
    }
    return p_t.pixels() == 0 ? T{0} : total / static_cast<T>(p_t.pixels());
}

/// Prototype-enhanced cross-entropy from its inputs (value only): cross-entropy
/// against y' restricted to pixels where y_t and y' agree, averaged over all pixels.
template <std::floating_point T>
T loss_pe_value(const ProbMap<T>& p_t, const OneHotMap& y_t, const OneHotMap& y_ref) {
    if (y_t.pixels() != p_t.pixels() || y_ref.pixels() != p_t.pixels()) {
        throw ParameterError("loss_pe: shape mismatch");
    }
    T total = 0;
    for (int i = 0; i < p_t.pixels(); ++i) {
        if (y_t.index(i) != y_ref.index(i)) continue;
        total -= std::log(p_t.pixel(i)[static_cast<std::size_t>(y_ref.index(i))] + kLogEpsilon<T>);
    }
    return p_t.pixels() == 0 ? T{0} : total / static_cast<T>(p_t.pixels());
}

/// Loss with gradients w.r.t. the target's feature-resolution logits and its features.
template <std::floating_point T>
struct ContrastLoss {
    T value = 0;
    LogitMap<T> grad_logits;
    FeatureMap<T> grad_features;
    ProbMap<T> p_ref;
    OneHotMap y_ref;
    OneHotMap y_t;
};

/// Prototype-symmetric loss, differentiable form.
///
/// `logits_t` is the target head output at feature resolution and `f_t` the
/// target features, both on the augmented image. y_t and y' enter as constants;
/// gradient reaches the logits through log p_t and the features through log p'.
template <std::floating_point T>
ContrastLoss<T> loss_ps(const LogitMap<T>& logits_t, const FeatureMap<T>& f_t, const PrototypeSet<T>& protos) {
    if (!logits_t.same_grid(f_t) || logits_t.channels() != protos.num_classes) {
        throw ParameterError("loss_ps: logits, features and prototypes disagree in shape");
    }
    ContrastLoss<T> r;
    const ProbMap<T> p_t = softmax(logits_t);
    r.y_t = pseudo_label(p_t);
    r.p_ref = reference_distribution(f_t, protos);
    r.y_ref = reference_labels(r.p_ref);
    r.value = loss_ps_value(p_t, r.y_t, r.p_ref, r.y_ref);

    const T n = static_cast<T>(p_t.pixels());
    auto first = weighted_cross_entropy<T>(p_t, r.y_ref.indices(), nullptr, n);
    r.grad_logits = std::move(first.grad_logits);

    // Second term: -(1/N) log(p'[y_t] + eps) through the clamped similarities.
    const T eps = kLogEpsilon<T>;
    const int C = protos.num_classes, D = protos.dim;
    r.grad_features = FeatureMap<T>(f_t.height(), f_t.width(), D);
    std::vector<T> sim(static_cast<std::size_t>(C));
    for (int i = 0; i < f_t.pixels(); ++i) {
        const auto f = f_t.pixel(i);
        const T total = ldsk_detail::similarities<T>(f, protos, sim);
        if (!(total > T{0})) continue;  // uniform fallback is locally constant
        const int y = r.y_t.index(i);
        const T s_y = sim[static_cast<std::size_t>(y)];
        const T py = s_y / total;
        const T outer = -T{1} / (n * (py + eps));
        auto g = r.grad_features.pixel(i);
        for (int j = 0; j < C; ++j) {
            if (!(sim[static_cast<std::size_t>(j)] > T{0})) continue;  // clamp inactive or class absent
            const T dp_ds = ((j == y ? T{1} : T{0}) - py) / total;
            const T coeff = outer * dp_ds;
            const auto k = protos.vector(j);
            for (int d = 0; d < D; ++d) g[static_cast<std::size_t>(d)] += coeff * k[static_cast<std::size_t>(d)];
        }
    }
    return r;
}

/// Prototype-enhanced loss, differentiable form. The agreement indicator is
/// a constant; the feature gradient is identically zero.
template <std::floating_point T>
ContrastLoss<T> loss_pe(const LogitMap<T>& logits_t, const FeatureMap<T>& f_t, const PrototypeSet<T>& protos) {
    if (!logits_t.same_grid(f_t) || logits_t.channels() != protos.num_classes) {
        throw ParameterError("loss_pe: logits, features and prototypes disagree in shape");
    }
    ContrastLoss<T> r;
    const ProbMap<T> p_t = softmax(logits_t);
    r.y_t = pseudo_label(p_t);
    r.p_ref = reference_distribution(f_t, protos);
    r.y_ref = reference_labels(r.p_ref);
    LabelMap targets = r.y_ref.indices();
    for (int i = 0; i < targets.pixels(); ++i) {
        if (r.y_t.index(i) != r.y_ref.index(i)) targets[i] = kIgnoreLabel;
    }
    auto ce = weighted_cross_entropy<T>(p_t, targets, nullptr, static_cast<T>(p_t.pixels()));
    r.value = ce.value;
    r.grad_logits = std::move(ce.grad_logits);
    r.grad_features = FeatureMap<T>(f_t.height(), f_t.width(), f_t.channels());
    return r;
}

// ---------------------------------------------------------------------------
// Prototype lifetime across iterations

enum class PrototypeMode {
    Dynamic,   // fresh per image and iteration
    Static,    // one dataset-level estimate before adaptation, then frozen
    Momentum,  // running k <- 0.99 k + 0.01 k_new
};

inline std::string_view to_string(PrototypeMode m) noexcept {
    switch (m) {
        case PrototypeMode::Dynamic: return "dynamic";
        case PrototypeMode::Static: return "static";
        case PrototypeMode::Momentum: return "momentum";
    }
    return "dynamic";
}

inline PrototypeMode parse_prototype_mode(std::string_view s) {
    if (s == "dynamic") return PrototypeMode::Dynamic;
    if (s == "static") return PrototypeMode::Static;
    if (s == "momentum") return PrototypeMode::Momentum;
    throw ParameterError("unknown prototype mode '" + std::string(s) + "' (expected dynamic, static or momentum)");
}

/// Running-average update of stored prototypes. Classes absent from `fresh`
/// keep their stored vector.
template <std::floating_point T>
void momentum_update(PrototypeSet<T>& running, const PrototypeSet<T>& fresh, double keep = 0.99) {
    if (running.num_classes != fresh.num_classes || running.dim != fresh.dim) {
        throw ParameterError("momentum_update: prototype shape mismatch");
    }
    const T a = static_cast<T>(keep), b = static_cast<T>(1.0 - keep);
    for (int c = 0; c < fresh.num_classes; ++c) {
        if (!fresh.is_present(c)) continue;
        auto k = running.vector(c);
        const auto kn = fresh.vector(c);
        for (int d = 0; d < fresh.dim; ++d) {
            k[static_cast<std::size_t>(d)] = a * k[static_cast<std::size_t>(d)] + b * kn[static_cast<std::size_t>(d)];
        }
        running.present[static_cast<std::size_t>(c)] = 1;
    }
}

/// Owns cross-iteration prototype state for the non-dynamic modes.
template <std::floating_point T>
class PrototypeStore {
public:
    PrototypeStore(PrototypeMode mode, int num_classes, int dim)
        : mode_(mode), running_(num_classes, dim) {}

    PrototypeMode mode() const noexcept { return mode_; }

    /// Static mode: install the dataset-level prototypes once.
    void freeze(PrototypeSet<T> protos) {
        running_ = std::move(protos);
        frozen_ = true;
    }
    bool frozen() const noexcept { return frozen_; }

    /// Prototypes to use for the current image given the memory model's
    /// features and feature-resolution probabilities.
    PrototypeSet<T> prototypes_for(const FeatureMap<T>& f_m, const ProbMap<T>& p_m, const std::string& id) {
        switch (mode_) {
            case PrototypeMode::Dynamic: return estimate_prototypes(f_m, p_m, id);
            case PrototypeMode::Static:
                if (!frozen_) throw PreconditionError("static prototypes requested before freeze()");
                return running_;
            case PrototypeMode::Momentum:
                momentum_update(running_, estimate_prototypes(f_m, p_m, id));
                return running_;
        }
        return running_;
    }

    const PrototypeSet<T>& stored() const noexcept { return running_; }

private:
    PrototypeMode mode_;
    PrototypeSet<T> running_;
    bool frozen_ = false;
};

}  // namespace iapc
