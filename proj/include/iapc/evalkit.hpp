#pragma once

/// @file evalkit.hpp
/// Segmentation metrics and the confidence-margin diagnostics.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iapc/common.hpp"
#include "iapc/data_synth.hpp"
#include "iapc/edik.hpp"
#include "iapc/prob.hpp"
#include "iapc/segmodel.hpp"

namespace iapc {

/// C x C pixel counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int num_classes)
        : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
        if (num_classes < 1 || num_classes > kMaxClasses) throw ParameterError("confusion matrix: bad class count");
    }

    int num_classes() const noexcept { return classes_; }
    std::int64_t& at(int gt, int pred) noexcept { return counts_[static_cast<std::size_t>(gt) * classes_ + pred]; }
    std::int64_t at(int gt, int pred) const noexcept {
        return counts_[static_cast<std::size_t>(gt) * classes_ + pred];
    }
    std::int64_t total() const noexcept { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.classes_ != classes_) throw ParameterError("confusion matrix: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;

private:
    int classes_ = 0;
    std::vector<std::int64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(const LabelMap& pred, const LabelMap& gt, int num_classes) {
    if (!pred.same_grid(gt)) throw ParameterError("confusion_matrix: prediction and ground truth differ in shape");
    ConfusionMatrix m(num_classes);
    for (int i = 0; i < gt.pixels(); ++i) {
        const int g = gt[i];
        if (g == kIgnoreLabel) continue;
        const int p = pred[i];
        if (g >= num_classes) throw ValidationError("confusion_matrix: ground-truth label outside class range");
        if (p >= num_classes) throw ValidationError("confusion_matrix: predicted label outside class range");
        ++m.at(g, p);
    }
    return m;
}

struct MetricsReport {
    ConfusionMatrix confusion;
    /// Per-class IoU; empty when the class has no ground truth and no prediction.
    std::vector<std::optional<double>> iou;
    double miou = 0.0;
    std::int64_t n_pixels = 0;
};

/// IoU = TP / (TP + FP + FN) per class; mIoU over defined classes only.
inline MetricsReport compute_metrics(const ConfusionMatrix& conf) {
    MetricsReport r;
    r.confusion = conf;
    r.n_pixels = conf.total();
    const int C = conf.num_classes();
    double sum = 0;
    int defined = 0;
    for (int c = 0; c < C; ++c) {
        const std::int64_t tp = conf.at(c, c);
        std::int64_t fp = 0, fn = 0;
        for (int k = 0; k < C; ++k) {
            if (k == c) continue;
            fp += conf.at(k, c);
            fn += conf.at(c, k);
        }
        const std::int64_t denom = tp + fp + fn;
        if (denom == 0) {
            r.iou.emplace_back(std::nullopt);
            continue;
        }
        const double v = static_cast<double>(tp) / static_cast<double>(denom);
        r.iou.emplace_back(v);
        sum += v;
        ++defined;
    }
    if (defined == 0) throw ValidationError("mIoU undefined: no class has ground truth or predictions");
    r.miou = sum / defined;
    return r;
}

/// Per-pixel argmax of the full-resolution logits.
template <std::floating_point T>
LabelMap predict(const SegmentationModel<T>& model, const Image& image) {
    const auto out = model.forward(image);
    LabelMap pred(image.height(), image.width());
    for (int i = 0; i < pred.pixels(); ++i) pred[i] = static_cast<std::uint8_t>(argmax(out.logits.pixel(i)));
    return pred;
}

/// Summed confusion over a labeled dataset.
template <std::floating_point T>
MetricsReport evaluate(const SegmentationModel<T>& model, const Dataset& data) {
    ConfusionMatrix total(model.arch().num_classes);
    for (const auto& s : data) {
        if (!s.has_label()) throw PreconditionError("evaluate: sample '" + s.id + "' has no label");
        total += confusion_matrix(predict(model, s.image), s.label, model.arch().num_classes);
    }
    return compute_metrics(total);
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json iou = nlohmann::json::array();
    for (const auto& v : r.iou) iou.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    nlohmann::json conf = nlohmann::json::array();
    for (int g = 0; g < r.confusion.num_classes(); ++g) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < r.confusion.num_classes(); ++p) row.push_back(r.confusion.at(g, p));
        conf.push_back(row);
    }
    return {{"miou", r.miou}, {"iou", iou}, {"n_pixels", r.n_pixels}, {"confusion", conf}};
}

inline std::string to_text_table(const MetricsReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << std::left << std::setw(8) << "class" << std::right << std::setw(8) << "IoU" << '\n';
    for (std::size_t c = 0; c < r.iou.size(); ++c) {
        os << std::left << std::setw(8) << c << std::right << std::setw(8);
        if (r.iou[c]) {
            os << 100.0 * *r.iou[c];
        } else {
            os << "n/a";
        }
        os << '\n';
    }
    os << std::left << std::setw(8) << "mIoU" << std::right << std::setw(8) << 100.0 * r.miou << '\n';
    os << std::left << std::setw(8) << "pixels" << std::right << std::setw(8) << r.n_pixels << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Confidence-margin diagnostics

struct MarginSample {
    double p1 = 0;
    double p2 = 0;
    double importance = 0;
    bool correct = false;
};

/// Means over sampled pixels, split by whether the argmax matches the label.
/// A group without pixels leaves its fields empty.
struct MarginStats {
    std::optional<double> mean_p1_correct;
    std::optional<double> mean_p2_correct;
    std::optional<double> mean_p1_wrong;
    std::optional<double> mean_p2_wrong;
    std::optional<double> mean_importance_correct;
    std::optional<double> mean_importance_wrong;
    std::int64_t correct_count = 0;
    std::int64_t wrong_count = 0;
    std::int64_t sample_count = 0;
};

/// Draws up to sample_n pixels without replacement from each of the correct
/// and incorrect groups (ignore-labeled pixels never enter either group).
template <std::floating_point T>
std::vector<MarginSample> sample_margin_pixels(const SegmentationModel<T>& model, const Dataset& labeled,
                                               std::size_t sample_n, std::uint64_t seed) {
    std::vector<MarginSample> correct, wrong;
    for (const auto& s : labeled) {
        if (!s.has_label()) throw PreconditionError("margin_diagnostics: sample '" + s.id + "' has no label");
        const ProbMap<T> p = softmax(model.forward(s.image).logits);
        for (int i = 0; i < p.pixels(); ++i) {
            const int g = s.label[i];
            if (g == kIgnoreLabel) continue;
            const auto top = top_two(p.pixel(i));
            MarginSample m{static_cast<double>(top.first), static_cast<double>(top.second),
                           static_cast<double>(pixel_importance<T>(p.pixel(i), ImportanceMode::IAPC)),
                           top.first_index == g};
            (m.correct ? correct : wrong).push_back(m);
        }
    }
    std::mt19937_64 rng(seed);
    auto draw = [&](std::vector<MarginSample>& pool) {
        const std::size_t k = std::min(sample_n, pool.size());
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        pool.resize(k);
    };
    draw(correct);
    draw(wrong);
    correct.insert(correct.end(), wrong.begin(), wrong.end());
    return correct;
}

inline MarginStats summarize_margins(const std::vector<MarginSample>& samples) {
    MarginStats st;
    double p1c = 0, p2c = 0, wc = 0, p1w = 0, p2w = 0, ww = 0;
    for (const auto& s : samples) {
        if (s.correct) {
            ++st.correct_count, p1c += s.p1, p2c += s.p2, wc += s.importance;
        } else {
            ++st.wrong_count, p1w += s.p1, p2w += s.p2, ww += s.importance;
        }
    }
    st.sample_count = st.correct_count + st.wrong_count;
    if (st.correct_count > 0) {
        const auto n = static_cast<double>(st.correct_count);
        st.mean_p1_correct = p1c / n;
        st.mean_p2_correct = p2c / n;
        st.mean_importance_correct = wc / n;
    }
    if (st.wrong_count > 0) {
        const auto n = static_cast<double>(st.wrong_count);
        st.mean_p1_wrong = p1w / n;
        st.mean_p2_wrong = p2w / n;
        st.mean_importance_wrong = ww / n;
    }
    return st;
}

template <std::floating_point T>
MarginStats margin_diagnostics(const SegmentationModel<T>& model, const Dataset& labeled, std::size_t sample_n = 1000,
                               std::uint64_t seed = 0) {
    return summarize_margins(sample_margin_pixels(model, labeled, sample_n, seed));
}

inline nlohmann::json to_json(const MarginStats& s) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"mean_p1_correct", opt(s.mean_p1_correct)},
            {"mean_p2_correct", opt(s.mean_p2_correct)},
            {"mean_p1_wrong", opt(s.mean_p1_wrong)},
            {"mean_p2_wrong", opt(s.mean_p2_wrong)},
            {"mean_importance_correct", opt(s.mean_importance_correct)},
            {"mean_importance_wrong", opt(s.mean_importance_wrong)},
            {"correct_count", s.correct_count},
            {"wrong_count", s.wrong_count},
            {"sample_count", s.sample_count}};
}

/// One row per group: group,count,mean_p1,mean_p2,mean_importance.
inline std::string margin_csv(const MarginStats& s) {
    std::ostringstream os;
    os << std::setprecision(9);
    auto field = [&](const std::optional<double>& v) {
        if (v) os << *v;
    };
    os << "group,count,mean_p1,mean_p2,mean_importance\n";
    os << "correct," << s.correct_count << ',';
    field(s.mean_p1_correct), os << ',', field(s.mean_p2_correct), os << ',', field(s.mean_importance_correct);
    os << "\nwrong," << s.wrong_count << ',';
    field(s.mean_p1_wrong), os << ',', field(s.mean_p2_wrong), os << ',', field(s.mean_importance_wrong);
    os << '\n';
    return os.str();
}

/// Importance map as 8-bit grayscale (255 = weight 1).
template <std::floating_point T>
Grid2<std::uint8_t> importance_to_gray(const ImportanceMap<T>& w) {
    Grid2<std::uint8_t> g(w.height(), w.width());
    for (int i = 0; i < w.pixels(); ++i) {
        const double v = std::clamp(static_cast<double>(w[i]), 0.0, 1.0);
        g[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return g;
}

}  // namespace iapc
