#pragma once

/// @file edik.hpp
/// Knowledge extraction from the frozen source model: pseudo-labels, the
/// importance map, the importance-weighted pseudo-label loss and the
/// entropy (information-maximization) loss.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <string_view>

#include "iapc/common.hpp"
#include "iapc/prob.hpp"

namespace iapc {

/// How the per-pixel weight of the pseudo-label loss is formed.
enum class ImportanceMode {
    IAPC,  // 1 - p2 / p1
    RPL,   // 1 (plain pseudo-label loss)
    FPL,   // p1
    SPL,   // 1 - p2
};

inline std::string_view to_string(ImportanceMode m) noexcept {
    switch (m) {
        case ImportanceMode::IAPC: return "iapc";
        case ImportanceMode::RPL: return "rpl";
        case ImportanceMode::FPL: return "fpl";
        case ImportanceMode::SPL: return "spl";
    }
    return "iapc";
}

inline ImportanceMode parse_importance_mode(std::string_view s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "iapc") return ImportanceMode::IAPC;
    if (lower == "rpl") return ImportanceMode::RPL;
    if (lower == "fpl") return ImportanceMode::FPL;
    if (lower == "spl") return ImportanceMode::SPL;
    throw ParameterError("unknown importance mode '" + std::string(s) + "' (expected iapc, rpl, fpl or spl)");
}

/// Scalar loss with its gradient w.r.t. the logits it was computed from.
template <std::floating_point T>
struct LossResult {
    T value = 0;
    LogitMap<T> grad_logits;
    /// Non-empty when the loss degenerated (no contributing pixels).
    std::string warning;
};

/// One-hot argmax of the source prediction; ties go to the lowest class.
template <std::floating_point T>
OneHotMap pseudo_label(const ProbMap<T>& p) {
    return argmax_onehot(p);
}

/// Importance of a single pixel distribution.
template <std::floating_point T>
T pixel_importance(std::span<const T> p, ImportanceMode mode) {
    const auto top = top_two(p);
    switch (mode) {
        case ImportanceMode::RPL: return T{1};
        case ImportanceMode::FPL: return std::clamp(top.first, T{0}, T{1});
        case ImportanceMode::SPL: return std::clamp(T{1} - top.second, T{0}, T{1});
        case ImportanceMode::IAPC: break;
    }
    if (!(top.first > T{0})) {
        throw NumericError("importance_map: pixel distribution has no positive entry");
    }
    return std::clamp(T{1} - top.second / top.first, T{0}, T{1});
}

/// Per-pixel weight from the frozen source prediction. The result is a plain
/// value; nothing downstream differentiates through it.
template <std::floating_point T>
ImportanceMap<T> importance_map(const ProbMap<T>& p_hat, ImportanceMode mode = ImportanceMode::IAPC) {
    ImportanceMap<T> w(p_hat.height(), p_hat.width());
    for (int i = 0; i < p_hat.pixels(); ++i) {
        w[i] = pixel_importance<T>(p_hat.pixel(i), mode);
    }
    return w;
}

namespace edik_detail {

inline bool ignored(const PixelMask* mask, int p) noexcept { return mask && (*mask)[p] != 0; }

template <typename T>
void check_mask(const PixelMask* mask, const Tensor3<T>& ref, const char* what) {
    if (mask && !mask->same_grid(ref)) throw ParameterError(std::string(what) + ": ignore mask shape mismatch");
}

}  // namespace edik_detail

/// Sum over pixels of -weight * log(p[target] + eps), divided by `normalizer`.
/// Target value kIgnoreLabel skips a pixel; a null weight map means weight 1.
/// Gradient is w.r.t. the logits that produced `probs`.
template <std::floating_point T>
LossResult<T> weighted_cross_entropy(const ProbMap<T>& probs, const LabelMap& targets, const Grid2<T>* weights,
                                     T normalizer) {
    if (!targets.same_grid(probs)) throw ParameterError("cross-entropy: target shape mismatch");
    if (weights && !weights->same_grid(probs)) throw ParameterError("cross-entropy: weight shape mismatch");
    LossResult<T> r;
    r.grad_logits = LogitMap<T>(probs.height(), probs.width(), probs.channels());
    if (!(normalizer > 0)) {
        r.warning = "no contributing pixels";
        return r;
    }
    const T eps = kLogEpsilon<T>;
    T total = 0;
    for (int i = 0; i < probs.pixels(); ++i) {
        const int y = targets[i];
        if (y == kIgnoreLabel) continue;
        if (y >= probs.channels()) throw ValidationError("cross-entropy: target index outside class range");
        const T w = weights ? (*weights)[i] : T{1};
        if (w == T{0}) continue;
        const auto p = probs.pixel(i);
        const T py = p[static_cast<std::size_t>(y)];
        total -= w * std::log(py + eps);
        // d/dz_j [-w log(p_y + eps)] = -w p_y (delta_jy - p_j) / (p_y + eps)
        const T scale = -w * py / ((py + eps) * normalizer);
        auto g = r.grad_logits.pixel(i);
        for (int j = 0; j < probs.channels(); ++j) {
            g[static_cast<std::size_t>(j)] = scale * ((j == y ? T{1} : T{0}) - p[static_cast<std::size_t>(j)]);
        }
    }
    r.value = total / normalizer;
    return r;
}

/// Importance-weighted pseudo-label loss on the target prediction.
///
/// L = -(1/N) sum_valid w * log(p_t[y_hat] + eps), N = number of non-ignored
/// pixels. `logits_t` are the target model's logits on the augmented image;
/// `y_hat` and `w` come from the source model on the clean image.
template <std::floating_point T>
LossResult<T> loss_ia(const LogitMap<T>& logits_t, const OneHotMap& y_hat, const ImportanceMap<T>& w,
                      const PixelMask* ignore = nullptr) {
    if (y_hat.height() != logits_t.height() || y_hat.width() != logits_t.width() ||
        y_hat.num_classes() != logits_t.channels()) {
        throw ParameterError("loss_ia: pseudo-label shape mismatch");
    }
    edik_detail::check_mask(ignore, logits_t, "loss_ia");
    LabelMap targets = y_hat.indices();
    int n = 0;
    for (int i = 0; i < targets.pixels(); ++i) {
        if (edik_detail::ignored(ignore, i)) {
            targets[i] = kIgnoreLabel;
        } else {
            ++n;
        }
    }
    auto r = weighted_cross_entropy(softmax(logits_t), targets, &w, static_cast<T>(n));
    if (n == 0) r.warning = "loss_ia: every pixel ignored, gradient is empty";
    return r;
}

/// Value of loss_ia from probabilities (no gradient).
template <std::floating_point T>
T loss_ia_value(const ProbMap<T>& p_t, const OneHotMap& y_hat, const ImportanceMap<T>& w,
                const PixelMask* ignore = nullptr) {
    T total = 0;
    int n = 0;
    for (int i = 0; i < p_t.pixels(); ++i) {
        if (edik_detail::ignored(ignore, i)) continue;
        ++n;
        total -= w[i] * std::log(p_t.pixel(i)[static_cast<std::size_t>(y_hat.index(i))] + kLogEpsilon<T>);
    }
    return n == 0 ? T{0} : total / static_cast<T>(n);
}

/// Mean per-pixel Shannon entropy of the target prediction.
///
/// L = -(1/N) sum_valid sum_c p_c log(p_c + eps).
template <std::floating_point T>
LossResult<T> loss_im(const LogitMap<T>& logits_t, const PixelMask* ignore = nullptr) {
    edik_detail::check_mask(ignore, logits_t, "loss_im");
    const ProbMap<T> p = softmax(logits_t);
    LossResult<T> r;
    r.grad_logits = LogitMap<T>(p.height(), p.width(), p.channels());
    int n = 0;
    for (int i = 0; i < p.pixels(); ++i) n += edik_detail::ignored(ignore, i) ? 0 : 1;
    if (n == 0) {
        r.warning = "loss_im: every pixel ignored, gradient is empty";
        return r;
    }
    const T eps = kLogEpsilon<T>;
    const T inv_n = T{1} / static_cast<T>(n);
    std::vector<T> dh(static_cast<std::size_t>(p.channels()));
    T total = 0;
    for (int i = 0; i < p.pixels(); ++i) {
        if (edik_detail::ignored(ignore, i)) continue;
        const auto pi = p.pixel(i);
        T mean_dh = 0;
        for (std::size_t c = 0; c < pi.size(); ++c) {
            total -= pi[c] * std::log(pi[c] + eps);
            dh[c] = -std::log(pi[c] + eps) - pi[c] / (pi[c] + eps);
            mean_dh += pi[c] * dh[c];
        }
        auto g = r.grad_logits.pixel(i);
        for (std::size_t c = 0; c < pi.size(); ++c) g[c] = inv_n * pi[c] * (dh[c] - mean_dh);
    }
    r.value = total * inv_n;
    return r;
}

/// Value of loss_im from probabilities.
template <std::floating_point T>
T loss_im_value(const ProbMap<T>& p, const PixelMask* ignore = nullptr) {
    T total = 0;
    int n = 0;
    for (int i = 0; i < p.pixels(); ++i) {
        if (edik_detail::ignored(ignore, i)) continue;
        ++n;
        for (T v : p.pixel(i)) total -= v * std::log(v + kLogEpsilon<T>);
    }
    return n == 0 ? T{0} : total / static_cast<T>(n);
}

}  // namespace iapc
