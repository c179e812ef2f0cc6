#pragma once

/// @file prob.hpp
/// Probability fields and one-hot label maps shared by every loss.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <string>

#include "iapc/common.hpp"

namespace iapc {

/// Per-pixel class probabilities (H x W x C).
template <std::floating_point T>
using ProbMap = Tensor3<T>;
/// Per-pixel unnormalized class scores (H x W x C).
template <std::floating_point T>
using LogitMap = Tensor3<T>;
/// Encoder output (h x w x D).
template <std::floating_point T>
using FeatureMap = Tensor3<T>;
/// Per-pixel weight in [0,1].
template <std::floating_point T>
using ImportanceMap = Grid2<T>;

/// Added inside every logarithm and division of the adaptation losses.
template <std::floating_point T>
inline constexpr T kLogEpsilon = static_cast<T>(1e-8);

/// One-hot field stored through its index view.
class OneHotMap {
public:
    OneHotMap() = default;
    OneHotMap(LabelMap indices, int num_classes) : indices_(std::move(indices)), num_classes_(num_classes) {
        if (num_classes < 1 || num_classes > kMaxClasses) {
            throw ParameterError("OneHotMap: class count out of range");
        }
        for (auto v : indices_.values()) {
            if (v >= num_classes) {
                throw ValidationError("OneHotMap: index " + std::to_string(v) + " outside class range");
            }
        }
    }

    int height() const noexcept { return indices_.height(); }
    int width() const noexcept { return indices_.width(); }
    int pixels() const noexcept { return indices_.pixels(); }
    int num_classes() const noexcept { return num_classes_; }

    int index(int p) const noexcept { return indices_[p]; }
    int index(int y, int x) const noexcept { return indices_(y, x); }
    int value(int y, int x, int c) const noexcept { return indices_(y, x) == c ? 1 : 0; }

    const LabelMap& indices() const noexcept { return indices_; }

    bool operator==(const OneHotMap&) const = default;

private:
    LabelMap indices_;
    int num_classes_ = 0;
};

/// Index of the largest entry; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> v) noexcept {
    int best = 0;
    for (int c = 1; c < static_cast<int>(v.size()); ++c) {
        if (v[static_cast<std::size_t>(c)] > v[static_cast<std::size_t>(best)]) {
            best = c;
        }
    }
    return best;
}

template <typename T>
struct TopTwo {
    int first_index = 0;
    T first = T{};
    /// Largest value among the entries other than first_index.
    T second = T{};
};

template <typename T>
TopTwo<T> top_two(std::span<const T> v) noexcept {
    TopTwo<T> out;
    out.first_index = argmax(v);
    out.first = v[static_cast<std::size_t>(out.first_index)];
    out.second = v.size() > 1 ? std::numeric_limits<T>::lowest() : T{};
    for (int c = 0; c < static_cast<int>(v.size()); ++c) {
        if (c != out.first_index) {
            out.second = std::max(out.second, v[static_cast<std::size_t>(c)]);
        }
    }
    return out;
}

/// Numerically stable softmax of one pixel.
template <std::floating_point T>
void softmax_pixel(std::span<const T> logits, std::span<T> out) {
    T peak = -std::numeric_limits<T>::infinity();
    for (T z : logits) {
        if (!std::isfinite(z)) {
            throw NumericError("softmax: non-finite logit");
        }
        peak = std::max(peak, z);
    }
    T total = 0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        out[c] = std::exp(logits[c] - peak);
        total += out[c];
    }
    for (auto& v : out) {
        v /= total;
    }
}

template <std::floating_point T>
ProbMap<T> softmax(const LogitMap<T>& logits) {
    ProbMap<T> out(logits.height(), logits.width(), logits.channels());
    for (int p = 0; p < logits.pixels(); ++p) {
        softmax_pixel<T>(logits.pixel(p), out.pixel(p));
    }
    return out;
}

/// One-hot of the per-pixel argmax (lowest index wins ties).
template <std::floating_point T>
OneHotMap argmax_onehot(const ProbMap<T>& p) {
    LabelMap idx(p.height(), p.width());
    for (int i = 0; i < p.pixels(); ++i) {
        idx[i] = static_cast<std::uint8_t>(argmax(p.pixel(i)));
    }
    return OneHotMap(std::move(idx), p.channels());
}

/// Throws unless every pixel is a distribution within tol.
template <std::floating_point T>
void check_prob_map(const ProbMap<T>& p, double tol = 1e-6) {
    for (int i = 0; i < p.pixels(); ++i) {
        double total = 0;
        for (T v : p.pixel(i)) {
            if (!(v >= 0) || !std::isfinite(v)) {
                throw ValidationError("probability map: negative or non-finite entry");
            }
            total += static_cast<double>(v);
        }
        if (std::abs(total - 1.0) > tol) {
            throw ValidationError("probability map: pixel does not sum to 1");
        }
    }
}

/// Convert a tensor to another scalar type.
template <typename To, typename From>
Tensor3<To> tensor_cast(const Tensor3<From>& in) {
    Tensor3<To> out(in.height(), in.width(), in.channels());
    std::transform(in.data(), in.data() + in.size(), out.data(), [](From v) { return static_cast<To>(v); });
    return out;
}

}  // namespace iapc
