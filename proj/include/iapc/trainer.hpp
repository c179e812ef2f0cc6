#pragma once

/// @file trainer.hpp
/// Source pretraining and the source-free adaptation loop.
///
/// One adaptation iteration, per batch item:
///   1. source model on the clean image -> pseudo-labels and importance (constants)
///   2. memory model on the clean image -> features and feature-resolution
///      probabilities for prototypes (constants)
///   3. target model on the jittered image -> features and logits
///   4. prototypes -> reference distribution and reference labels
///   5. weighted sum of the four losses, backward into the target model
/// then an SGD step on the target and an EMA step on the memory model.

#include <array>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "iapc/common.hpp"
#include "iapc/data_synth.hpp"
#include "iapc/edik.hpp"
#include "iapc/ldsk.hpp"
#include "iapc/prob.hpp"
#include "iapc/segmodel.hpp"

namespace iapc {

// ---------------------------------------------------------------------------
// Configuration

struct AdaptationConfig {
    double lambda_ia = 0.2;
    double lambda_pe = 0.5;
    double lambda_ps = 0.01;
    double lambda_im = 2.0;
    double alpha_ema = 1e-4;
    double lr = 1e-4;
    double lr_power = 0.9;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 6;
    int iterations = 1000;
    int crop_h = 0;  // 0 disables cropping
    int crop_w = 0;
    std::uint64_t seed = 0;
    ImportanceMode importance_mode = ImportanceMode::IAPC;
    PrototypeMode prototype_mode = PrototypeMode::Dynamic;
    bool ema_enabled = true;
    double augment_strength = 1.0;

    void validate() const {
        for (double w : {lambda_ia, lambda_pe, lambda_ps, lambda_im}) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("adaptation config: loss weights must be >= 0");
        }
        if (!(alpha_ema >= 0.0 && alpha_ema <= 1.0)) throw ParameterError("adaptation config: alpha_ema outside [0,1]");
        if (!(lr_power > 0.0)) throw ParameterError("adaptation config: lr_power must be > 0");
        if (!(lr >= 0.0)) throw ParameterError("adaptation config: lr must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("adaptation config: momentum outside [0,1)");
        if (!(weight_decay >= 0.0)) throw ParameterError("adaptation config: weight_decay must be >= 0");
        if (batch_size < 1 || iterations < 0) throw ParameterError("adaptation config: batch_size/iterations");
        if (crop_h < 0 || crop_w < 0) throw ParameterError("adaptation config: negative crop");
        if (!(augment_strength >= 0.0 && augment_strength <= 1.0)) {
            throw ParameterError("adaptation config: augment_strength outside [0,1]");
        }
    }

    bool all_weights_zero() const noexcept {
        return lambda_ia == 0.0 && lambda_pe == 0.0 && lambda_ps == 0.0 && lambda_im == 0.0;
    }

    /// Settings for the built-in 64x64 benchmark. The lr is the full-scale
    /// one; the run is short and augmentation is light because 200 small
    /// images are seen many times over and heavy jitter would swamp the shift.
    static AdaptationConfig desk() {
        AdaptationConfig c;
        c.iterations = 150;
        c.augment_strength = 0.1;
        return c;
    }
};

struct PretrainConfig {
    ArchDescriptor arch;
    double lr = 2.5e-4;
    double lr_power = 0.9;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 6;
    int iterations = 2000;
    int crop_h = 0;
    int crop_w = 0;
    std::uint64_t seed = 0;

    void validate() const {
        arch.validate();
        if (!(lr >= 0.0) || !(lr_power > 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
            throw ParameterError("pretrain config: invalid optimizer settings");
        }
        if (batch_size < 1 || iterations < 0 || crop_h < 0 || crop_w < 0) {
            throw ParameterError("pretrain config: invalid batch/iteration/crop settings");
        }
    }

    static PretrainConfig desk() {
        PretrainConfig c;
        c.lr = 0.02;
        c.iterations = 2000;
        return c;
    }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ParameterError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

inline long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long d = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ParameterError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ParameterError("config: '" + key + "' expects true/false, got '" + v + "'");
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace config_detail

/// Names accepted by set_config_value for AdaptationConfig.
inline const std::vector<std::string>& adaptation_config_keys() {
    static const std::vector<std::string> keys{
        "lambda_ia", "lambda_pe", "lambda_ps", "lambda_im", "alpha_ema", "lr", "lr_power", "momentum", "weight_decay",
        "batch_size", "iterations", "crop_h", "crop_w", "seed", "importance_mode", "prototype_mode", "ema_enabled",
        "augment_strength"};
    return keys;
}

inline void set_config_value(AdaptationConfig& c, const std::string& key, const std::string& value) {
    using namespace config_detail;
    if (key == "lambda_ia") c.lambda_ia = to_double(key, value);
    else if (key == "lambda_pe") c.lambda_pe = to_double(key, value);
    else if (key == "lambda_ps") c.lambda_ps = to_double(key, value);
    else if (key == "lambda_im") c.lambda_im = to_double(key, value);
    else if (key == "alpha_ema") c.alpha_ema = to_double(key, value);
    else if (key == "lr") c.lr = to_double(key, value);
    else if (key == "lr_power") c.lr_power = to_double(key, value);
    else if (key == "momentum") c.momentum = to_double(key, value);
    else if (key == "weight_decay") c.weight_decay = to_double(key, value);
    else if (key == "batch_size") c.batch_size = static_cast<int>(to_int(key, value));
    else if (key == "iterations") c.iterations = static_cast<int>(to_int(key, value));
    else if (key == "crop_h") c.crop_h = static_cast<int>(to_int(key, value));
    else if (key == "crop_w") c.crop_w = static_cast<int>(to_int(key, value));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, value));
    else if (key == "importance_mode") c.importance_mode = parse_importance_mode(value);
    else if (key == "prototype_mode") c.prototype_mode = parse_prototype_mode(value);
    else if (key == "ema_enabled") c.ema_enabled = to_bool(key, value);
    else if (key == "augment_strength") c.augment_strength = to_double(key, value);
    else {
        std::string valid;
        for (const auto& k : adaptation_config_keys()) valid += (valid.empty() ? "" : ", ") + k;
        throw ParameterError("unknown config key '" + key + "' (valid: " + valid + ")");
    }
}

/// Applies `key = value` lines on top of `base`. Blank lines and `#` comments
/// are skipped. Works for any config type with a set_config_value overload.
template <typename Config>
Config apply_config_text(std::string_view text, Config base) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = config_detail::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParameterError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        set_config_value(base, config_detail::trim(t.substr(0, eq)), config_detail::trim(t.substr(eq + 1)));
    }
    base.validate();
    return base;
}

inline AdaptationConfig parse_adaptation_config(std::string_view text, AdaptationConfig base = {}) {
    return apply_config_text(text, std::move(base));
}

/// Canonical text form; parse_adaptation_config(to_config_text(c)) == c.
inline std::string to_config_text(const AdaptationConfig& c) {
    using config_detail::fmt;
    std::ostringstream os;
    os << "lambda_ia = " << fmt(c.lambda_ia) << '\n'
       << "lambda_pe = " << fmt(c.lambda_pe) << '\n'
       << "lambda_ps = " << fmt(c.lambda_ps) << '\n'
       << "lambda_im = " << fmt(c.lambda_im) << '\n'
       << "alpha_ema = " << fmt(c.alpha_ema) << '\n'
       << "lr = " << fmt(c.lr) << '\n'
       << "lr_power = " << fmt(c.lr_power) << '\n'
       << "momentum = " << fmt(c.momentum) << '\n'
       << "weight_decay = " << fmt(c.weight_decay) << '\n'
       << "batch_size = " << c.batch_size << '\n'
       << "iterations = " << c.iterations << '\n'
       << "crop_h = " << c.crop_h << '\n'
       << "crop_w = " << c.crop_w << '\n'
       << "seed = " << c.seed << '\n'
       << "importance_mode = " << to_string(c.importance_mode) << '\n'
       << "prototype_mode = " << to_string(c.prototype_mode) << '\n'
       << "ema_enabled = " << (c.ema_enabled ? "true" : "false") << '\n'
       << "augment_strength = " << fmt(c.augment_strength) << '\n';
    return os.str();
}

inline std::uint64_t config_hash(const AdaptationConfig& c) {
    Fnv1a h;
    h.update(to_config_text(c));
    return h.digest();
}

inline std::string to_config_text(const PretrainConfig& c) {
    using config_detail::fmt;
    std::ostringstream os;
    os << "in_channels = " << c.arch.in_channels << '\n'
       << "base_width = " << c.arch.base_width << '\n'
       << "feature_dim = " << c.arch.feature_dim << '\n'
       << "feature_stride = " << c.arch.feature_stride << '\n'
       << "num_classes = " << c.arch.num_classes << '\n'
       << "lr = " << fmt(c.lr) << '\n'
       << "lr_power = " << fmt(c.lr_power) << '\n'
       << "momentum = " << fmt(c.momentum) << '\n'
       << "weight_decay = " << fmt(c.weight_decay) << '\n'
       << "batch_size = " << c.batch_size << '\n'
       << "iterations = " << c.iterations << '\n'
       << "crop_h = " << c.crop_h << '\n'
       << "crop_w = " << c.crop_w << '\n'
       << "seed = " << c.seed << '\n';
    return os.str();
}

inline const std::vector<std::string>& pretrain_config_keys() {
    static const std::vector<std::string> keys{"in_channels", "base_width", "feature_dim", "feature_stride",
                                               "num_classes", "lr",        "lr_power",    "momentum",
                                               "weight_decay", "batch_size", "iterations", "crop_h",
                                               "crop_w",       "seed"};
    return keys;
}

inline void set_config_value(PretrainConfig& c, const std::string& key, const std::string& value) {
    using namespace config_detail;
    if (key == "in_channels") c.arch.in_channels = static_cast<int>(to_int(key, value));
    else if (key == "base_width") c.arch.base_width = static_cast<int>(to_int(key, value));
    else if (key == "feature_dim") c.arch.feature_dim = static_cast<int>(to_int(key, value));
    else if (key == "feature_stride") c.arch.feature_stride = static_cast<int>(to_int(key, value));
    else if (key == "num_classes") c.arch.num_classes = static_cast<int>(to_int(key, value));
    else if (key == "lr") c.lr = to_double(key, value);
    else if (key == "lr_power") c.lr_power = to_double(key, value);
    else if (key == "momentum") c.momentum = to_double(key, value);
    else if (key == "weight_decay") c.weight_decay = to_double(key, value);
    else if (key == "batch_size") c.batch_size = static_cast<int>(to_int(key, value));
    else if (key == "iterations") c.iterations = static_cast<int>(to_int(key, value));
    else if (key == "crop_h") c.crop_h = static_cast<int>(to_int(key, value));
    else if (key == "crop_w") c.crop_w = static_cast<int>(to_int(key, value));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, value));
    else {
        std::string valid;
        for (const auto& k : pretrain_config_keys()) valid += (valid.empty() ? "" : ", ") + k;
        throw ParameterError("unknown config key '" + key + "' (valid: " + valid + ")");
    }
}

inline PretrainConfig parse_pretrain_config(std::string_view text, PretrainConfig base = {}) {
    return apply_config_text(text, std::move(base));
}

inline std::uint64_t config_hash(const PretrainConfig& c) {
    Fnv1a h;
    h.update(to_config_text(c));
    return h.digest();
}

// ---------------------------------------------------------------------------
// Training log

/// Append-only table of per-iteration records.
class TrainLog {
public:
    TrainLog() = default;
    explicit TrainLog(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    const std::vector<std::string>& columns() const noexcept { return columns_; }
    std::size_t size() const noexcept { return rows_.size(); }
    bool empty() const noexcept { return rows_.empty(); }

    void append(std::vector<double> row, double wall_seconds) {
        if (row.size() != columns_.size()) throw ParameterError("TrainLog: row width mismatch");
        rows_.push_back(std::move(row));
        wall_.push_back(wall_seconds);
    }

    const std::vector<double>& row(std::size_t i) const { return rows_.at(i); }
    double wall_time(std::size_t i) const { return wall_.at(i); }

    double value(std::size_t i, std::string_view column) const {
        for (std::size_t c = 0; c < columns_.size(); ++c) {
            if (columns_[c] == column) return rows_.at(i)[c];
        }
        throw ParameterError("TrainLog: no column '" + std::string(column) + "'");
    }

    /// Records compare equal ignoring wall time.
    bool same_records(const TrainLog& o) const { return columns_ == o.columns_ && rows_ == o.rows_; }

    /// CSV with a header row. Wall time is opt-in so that the default output
    /// is reproducible byte for byte.
    std::string to_csv(bool include_wall_time = false) const {
        std::ostringstream os;
        os << std::setprecision(9);
        for (std::size_t c = 0; c < columns_.size(); ++c) os << (c ? "," : "") << columns_[c];
        if (include_wall_time) os << ",wall_time_s";
        os << '\n';
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            for (std::size_t c = 0; c < columns_.size(); ++c) os << (c ? "," : "") << rows_[r][c];
            if (include_wall_time) os << ',' << wall_[r];
            os << '\n';
        }
        return os.str();
    }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
    std::vector<double> wall_;
};

// ---------------------------------------------------------------------------
// Optimization

/// base * (1 - step/total)^power; base at step 0, 0 at step == total.
inline double poly_lr(double base, long step, long total, double power) {
    if (total <= 0) return base;
    const double frac = std::clamp(1.0 - static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
    return base * std::pow(frac, power);
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <std::floating_point T>
class SgdMomentum {
public:
    SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(SegmentationModel<T>& model, const ParamGrads<T>& grads, double lr) {
        auto& params = model.params();
        if (velocity_.empty()) velocity_ = model.zero_grads();
        if (grads.size() != params.size()) throw ParameterError("sgd: gradient buffer mismatch");
        const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), eta = static_cast<T>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i].values;
            auto& v = velocity_[i];
            const auto& g = grads[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                v[k] = mu * v[k] + g[k] + wd * w[k];
                w[k] -= eta * v[k];
            }
        }
    }

private:
    double momentum_;
    double weight_decay_;
    ParamGrads<T> velocity_;
};

/// Index order for the four adaptation losses in total_loss.
enum LossComponent : std::size_t { kLossIA = 0, kLossPE = 1, kLossPS = 2, kLossIM = 3 };

inline constexpr std::array<const char*, 4> kLossNames{"loss_ia", "loss_pe", "loss_ps", "loss_im"};

/// Weighted sum of the loss components (IA, PE, PS, IM order). A non-finite
/// component aborts with its name and the iteration.
inline double total_loss(const std::array<double, 4>& components, const std::array<double, 4>& weights,
                         long iteration = -1) {
    double total = 0;
    for (std::size_t i = 0; i < components.size(); ++i) {
        if (!std::isfinite(components[i])) {
            throw NumericError(std::string("non-finite ") + kLossNames[i] + " at iteration " +
                               std::to_string(iteration));
        }
        if (!std::isfinite(weights[i])) throw NumericError(std::string("non-finite weight for ") + kLossNames[i]);
        total += weights[i] * components[i];
    }
    return total;
}

inline std::array<double, 4> loss_weights(const AdaptationConfig& c) {
    return {c.lambda_ia, c.lambda_pe, c.lambda_ps, c.lambda_im};
}

namespace train_detail {

/// Cyclic shuffled pass over dataset indices.
class EpochSampler {
public:
    EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        reshuffle();
    }
    std::size_t next() {
        if (pos_ == order_.size()) reshuffle();
        return order_[pos_++];
    }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

struct CropWindow {
    int y = 0;
    int x = 0;
    int h = 0;
    int w = 0;
};

inline CropWindow pick_crop(int height, int width, int crop_h, int crop_w, std::mt19937_64& rng) {
    if (crop_h <= 0 || crop_w <= 0 || (crop_h >= height && crop_w >= width)) return {0, 0, height, width};
    const int h = std::min(crop_h, height), w = std::min(crop_w, width);
    const int y = std::uniform_int_distribution<int>(0, height - h)(rng);
    const int x = std::uniform_int_distribution<int>(0, width - w)(rng);
    return {y, x, h, w};
}

template <typename T>
Tensor3<T> crop(const Tensor3<T>& in, const CropWindow& c) {
    if (c.y == 0 && c.x == 0 && c.h == in.height() && c.w == in.width()) return in;
    Tensor3<T> out(c.h, c.w, in.channels());
    for (int y = 0; y < c.h; ++y) {
        for (int x = 0; x < c.w; ++x) {
            std::copy_n(in.pixel(c.y + y, c.x + x).data(), in.channels(), out.pixel(y, x).data());
        }
    }
    return out;
}

template <typename T>
Grid2<T> crop(const Grid2<T>& in, const CropWindow& c) {
    if (c.y == 0 && c.x == 0 && c.h == in.height() && c.w == in.width()) return in;
    Grid2<T> out(c.h, c.w);
    for (int y = 0; y < c.h; ++y) {
        for (int x = 0; x < c.w; ++x) out(y, x) = in(c.y + y, c.x + x);
    }
    return out;
}

template <typename T>
void add_scaled(Tensor3<T>& acc, const Tensor3<T>& g, double scale) {
    if (g.empty() || scale == 0.0) return;
    const T s = static_cast<T>(scale);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += s * g.data()[i];
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace train_detail

/// Called after each logged iteration with (iteration, log).
using ProgressFn = std::function<void(long, const TrainLog&)>;

// ---------------------------------------------------------------------------
// Source pretraining

template <std::floating_point T>
struct PretrainResult {
    SegmentationModel<T> model;
    TrainLog log;
};

/// Per-pixel cross-entropy on labeled source images (ignore pixels excluded),
/// SGD with momentum and poly decay.
template <std::floating_point T = float>
PretrainResult<T> pretrain_source(const Dataset& source, const PretrainConfig& cfg, const ProgressFn& progress = {}) {
    using namespace train_detail;
    cfg.validate();
    if (source.empty()) throw ParameterError("pretrain_source: empty dataset");
    for (const auto& s : source) {
        if (!s.has_label()) throw PreconditionError("pretrain_source: sample '" + s.id + "' has no label");
    }
    PretrainResult<T> out{SegmentationModel<T>::initialized(cfg.arch, synth_detail::mix(cfg.seed, 0x696e6974)),
                          TrainLog({"step", "loss_ce", "lr"})};
    SgdMomentum<T> opt(cfg.momentum, cfg.weight_decay);
    EpochSampler sampler(source.size(), synth_detail::mix(cfg.seed, 0x6f72646572));
    std::mt19937_64 crop_rng(synth_detail::mix(cfg.seed, 0x63726f70));
    const auto t0 = std::chrono::steady_clock::now();
    ForwardCache<T> cache;

    for (long it = 0; it < cfg.iterations; ++it) {
        const double lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.lr_power);
        ParamGrads<T> grads = out.model.zero_grads();
        double batch_loss = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& s = source[sampler.next()];
            const auto win = pick_crop(s.image.height(), s.image.width(), cfg.crop_h, cfg.crop_w, crop_rng);
            const Image img = crop(s.image, win);
            const LabelMap lab = crop(s.label, win);
            const auto fwd = out.model.forward(img, &cache);
            int valid = 0;
            for (auto v : lab.values()) valid += v != kIgnoreLabel ? 1 : 0;
            auto ce = weighted_cross_entropy<T>(softmax(fwd.logits), lab, nullptr, static_cast<T>(valid));
            batch_loss += static_cast<double>(ce.value) / cfg.batch_size;
            if (valid == 0) continue;
            const T scale = T{1} / static_cast<T>(cfg.batch_size);
            for (auto& g : ce.grad_logits.values()) g *= scale;
            out.model.backward(cache, &ce.grad_logits, nullptr, nullptr, grads);
        }
        if (!std::isfinite(batch_loss)) {
            throw NumericError("pretrain_source: non-finite loss at iteration " + std::to_string(it));
        }
        opt.step(out.model, grads, lr);
        out.log.append({static_cast<double>(it), batch_loss, lr}, seconds_since(t0));
        if (progress) progress(it, out.log);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Source-free adaptation

template <std::floating_point T>
struct AdaptationResult {
    SegmentationModel<T> target;
    SegmentationModel<T> memory;
    TrainLog log;
};

inline std::vector<std::string> adaptation_log_columns() {
    return {"step", "loss_ia", "loss_im", "loss_ps", "loss_pe", "total", "lr"};
}

/// Stepwise form of the adaptation loop. Owns the model triplet, optimizer
/// state, prototype store and samplers; `adapt` drives it to completion.
template <std::floating_point T = float>
class Adapter {
public:
    /// `expected_arch`, when given, must match the source. Only `image` and
    /// `id` of each target sample are read.
    Adapter(const SegmentationModel<T>& source, Dataset target_images, const AdaptationConfig& cfg,
            const std::optional<ArchDescriptor>& expected_arch = {})
        : cfg_((cfg.validate(), cfg)),
          data_(std::move(target_images)),
          models_(check_inputs(source, data_, expected_arch)),
          store_(cfg.prototype_mode, source.arch().num_classes, source.arch().feature_dim),
          opt_(cfg.momentum, cfg.weight_decay),
          sampler_(data_.size(), synth_detail::mix(cfg.seed, 0x6f72646572)),
          crop_rng_(synth_detail::mix(cfg.seed, 0x63726f70)),
          log_(adaptation_log_columns()),
          t0_(std::chrono::steady_clock::now()) {
        if (uses_prototypes() && cfg_.prototype_mode == PrototypeMode::Static && !cfg_.all_weights_zero()) {
            const ArchDescriptor& arch = source.arch();
            PrototypeAccumulator<T> acc(arch.num_classes, arch.feature_dim);
            for (const auto& s : data_) {
                const auto m = models_.memory().forward(s.image);
                acc.add(m.features, softmax(m.logits_feat));
            }
            store_.freeze(acc.finish("static"));
        }
    }

    const AdaptationConfig& config() const noexcept { return cfg_; }
    const ModelTriplet<T>& models() const noexcept { return models_; }
    const TrainLog& log() const noexcept { return log_; }
    const PrototypeStore<T>& prototypes() const noexcept { return store_; }
    long iteration() const noexcept { return iteration_; }
    bool done() const noexcept { return iteration_ >= cfg_.iterations; }

    /// One optimizer step over one batch. With every loss weight at zero the
    /// objective is identically zero and no parameter is touched.
    void step() {
        using namespace train_detail;
        const long it = iteration_++;
        if (cfg_.all_weights_zero()) return;
        const double lr = poly_lr(cfg_.lr, it, cfg_.iterations, cfg_.lr_power);
        const auto weights = loss_weights(cfg_);
        const double inv_batch = 1.0 / cfg_.batch_size;
        ParamGrads<T> grads = models_.target().zero_grads();
        std::array<double, 4> mean_components{};
        double mean_total = 0;
        for (int b = 0; b < cfg_.batch_size; ++b) {
            const auto& s = data_[sampler_.next()];
            const auto win = pick_crop(s.image.height(), s.image.width(), cfg_.crop_h, cfg_.crop_w, crop_rng_);
            const Image clean = crop(s.image, win);
            const std::uint64_t aug_seed = synth_detail::mix(
                synth_detail::mix(cfg_.seed, static_cast<std::uint64_t>(it)), static_cast<std::uint64_t>(b));
            const Image jittered = photometric_augment(clean, cfg_.augment_strength, aug_seed);

            const auto tgt = models_.target().forward(jittered, &cache_);
            std::array<double, 4> comp{};
            LogitMap<T> g_full(tgt.logits.height(), tgt.logits.width(), tgt.logits.channels());
            LogitMap<T> g_feat(tgt.logits_feat.height(), tgt.logits_feat.width(), tgt.logits_feat.channels());
            FeatureMap<T> g_f(tgt.features.height(), tgt.features.width(), tgt.features.channels());

            if (cfg_.lambda_ia > 0.0) {
                const ProbMap<T> p_hat = softmax(models_.source().forward(clean).logits);
                const auto ia = loss_ia(tgt.logits, pseudo_label(p_hat), importance_map(p_hat, cfg_.importance_mode));
                comp[kLossIA] = static_cast<double>(ia.value);
                add_scaled(g_full, ia.grad_logits, cfg_.lambda_ia * inv_batch);
            }
            if (cfg_.lambda_im > 0.0) {
                const auto im = loss_im(tgt.logits);
                comp[kLossIM] = static_cast<double>(im.value);
                add_scaled(g_full, im.grad_logits, cfg_.lambda_im * inv_batch);
            }
            if (uses_prototypes()) {
                const auto mem = models_.memory().forward(clean);
                const auto protos = store_.prototypes_for(mem.features, softmax(mem.logits_feat), s.id);
                if (protos.present_count() > 0) {
                    const auto ps = loss_ps(tgt.logits_feat, tgt.features, protos);
                    const auto pe = loss_pe(tgt.logits_feat, tgt.features, protos);
                    comp[kLossPS] = static_cast<double>(ps.value);
                    comp[kLossPE] = static_cast<double>(pe.value);
                    add_scaled(g_feat, ps.grad_logits, cfg_.lambda_ps * inv_batch);
                    add_scaled(g_f, ps.grad_features, cfg_.lambda_ps * inv_batch);
                    add_scaled(g_feat, pe.grad_logits, cfg_.lambda_pe * inv_batch);
                }
            }
            mean_total += total_loss(comp, weights, it) * inv_batch;
            for (std::size_t k = 0; k < 4; ++k) mean_components[k] += comp[k] * inv_batch;
            models_.target().backward(cache_, &g_full, &g_feat, &g_f, grads);
        }
        opt_.step(models_.target(), grads, lr);
        if (cfg_.ema_enabled) {
            ema_update(models_.memory(), models_.target(), cfg_.alpha_ema);
        } else {
            models_.memory() = models_.target();
        }
        log_.append({static_cast<double>(it), mean_components[kLossIA], mean_components[kLossIM],
                     mean_components[kLossPS], mean_components[kLossPE], mean_total, lr},
                    seconds_since(t0_));
    }

private:
    bool uses_prototypes() const noexcept { return cfg_.lambda_ps > 0.0 || cfg_.lambda_pe > 0.0; }

    static const SegmentationModel<T>& check_inputs(const SegmentationModel<T>& source, const Dataset& data,
                                                    const std::optional<ArchDescriptor>& expected_arch) {
        if (expected_arch && !(*expected_arch == source.arch())) {
            throw ParameterError("adapt: source checkpoint architecture does not match the configured architecture");
        }
        if (data.empty()) throw ParameterError("adapt: no target images");
        for (const auto& s : data) {
            if (s.image.channels() != source.arch().in_channels) {
                throw ParameterError("adapt: image '" + s.id + "' channel count does not match the model");
            }
        }
        return source;
    }

    AdaptationConfig cfg_;
    Dataset data_;
    ModelTriplet<T> models_;
    PrototypeStore<T> store_;
    SgdMomentum<T> opt_;
    train_detail::EpochSampler sampler_;
    std::mt19937_64 crop_rng_;
    TrainLog log_;
    std::chrono::steady_clock::time_point t0_;
    ForwardCache<T> cache_;
    long iteration_ = 0;
};

/// Adapts a copy of `source` to the target images and returns the final
/// target and memory models with the per-iteration log.
template <std::floating_point T = float>
AdaptationResult<T> adapt(const SegmentationModel<T>& source, const Dataset& target_images,
                          const AdaptationConfig& cfg, const std::optional<ArchDescriptor>& expected_arch = {},
                          const ProgressFn& progress = {}) {
    Adapter<T> run(source, target_images, cfg, expected_arch);
    while (!run.done()) {
        run.step();
        if (progress && !run.log().empty()) progress(run.iteration() - 1, run.log());
    }
    return {run.models().target(), run.models().memory(), run.log()};
}

}  // namespace iapc
