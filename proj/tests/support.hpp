#pragma once

// Shared generators and scalar oracles for the test binaries.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "iapc/iapc.hpp"

namespace iapc::testing {

/// Random logits in [-scale, scale].
template <typename T>
LogitMap<T> random_logits(std::mt19937_64& rng, int h, int w, int c, double scale = 3.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    LogitMap<T> out(h, w, c);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<T>(u(rng));
    return out;
}

template <typename T>
FeatureMap<T> random_features(std::mt19937_64& rng, int h, int w, int d, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    FeatureMap<T> out(h, w, d);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<T>(u(rng));
    return out;
}

/// Random distribution over c classes; sometimes sparse, sometimes peaked.
inline std::vector<double> random_distribution(std::mt19937_64& rng, int c) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(static_cast<std::size_t>(c));
    const double sparsity = u(rng) < 0.3 ? 0.5 : 0.0;
    const double power = 1.0 + 4.0 * u(rng);
    double total = 0;
    for (auto& v : p) {
        v = u(rng) < sparsity ? 0.0 : std::pow(u(rng), power);
        total += v;
    }
    if (total == 0) {
        p[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, c - 1)(rng))] = 1.0;
        total = 1.0;
    }
    for (auto& v : p) v /= total;
    return p;
}

template <typename T>
ProbMap<T> random_probs(std::mt19937_64& rng, int h, int w, int c) {
    ProbMap<T> out(h, w, c);
    for (int i = 0; i < out.pixels(); ++i) {
        const auto d = random_distribution(rng, c);
        for (int k = 0; k < c; ++k) out.pixel(i)[static_cast<std::size_t>(k)] = static_cast<T>(d[static_cast<std::size_t>(k)]);
    }
    return out;
}

inline LabelMap random_labels(std::mt19937_64& rng, int h, int w, int c) {
    std::uniform_int_distribution<int> u(0, c - 1);
    LabelMap m(h, w);
    for (int i = 0; i < m.pixels(); ++i) m[i] = static_cast<std::uint8_t>(u(rng));
    return m;
}

/// Central difference of f along every entry of x.
template <typename T>
std::vector<double> numeric_gradient(Tensor3<T>& x, const std::function<double()>& f, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T keep = x.data()[i];
        x.data()[i] = keep + static_cast<T>(h);
        const double up = f();
        x.data()[i] = keep - static_cast<T>(h);
        const double down = f();
        x.data()[i] = keep;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(1, |b_i|) style relative error over a whole vector.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max(scale, std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    }
    return diff / std::max(scale, 1e-8);
}

template <typename T>
std::vector<double> to_vector(const Tensor3<T>& t) {
    return std::vector<double>(t.data(), t.data() + t.size());
}

/// Brute-force oracles, written independently of the library loops.
namespace oracle {

inline double importance(const std::vector<double>& p) {
    std::vector<double> s = p;
    std::sort(s.begin(), s.end(), std::greater<>());
    return 1.0 - s[1] / s[0];
}

inline int argmax_lowest(const std::vector<double>& p) {
    int best = 0;
    for (int c = 0; c < static_cast<int>(p.size()); ++c) {
        if (p[static_cast<std::size_t>(c)] > p[static_cast<std::size_t>(best)]) best = c;
    }
    return best;
}

template <typename T>
std::vector<double> pixel(const Tensor3<T>& t, int y, int x) {
    std::vector<double> v;
    for (int c = 0; c < t.channels(); ++c) v.push_back(static_cast<double>(t(y, x, c)));
    return v;
}

}  // namespace oracle

}  // namespace iapc::testing
