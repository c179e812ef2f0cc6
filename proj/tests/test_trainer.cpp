#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace iapc;

namespace {

ArchDescriptor small_arch() {
    ArchDescriptor a;
    a.base_width = 4;
    a.feature_dim = 6;
    a.feature_stride = 4;
    a.num_classes = 3;
    return a;
}

Dataset small_target(int n = 4) {
    DomainShiftSpec shift;
    shift.contrast_scale = 0.7;
    return generate_scene_dataset(n, 3, 16, 16, shift, 5);
}

AdaptationConfig quick_config(int iterations = 3) {
    AdaptationConfig c;
    c.iterations = iterations;
    c.batch_size = 2;
    c.lr = 1e-3;
    c.augment_strength = 0.5;
    return c;
}

Dataset strip_labels(Dataset d) {
    for (auto& s : d) s.label = LabelMap();
    return d;
}

}  // namespace

TEST(AdaptationConfig, DefaultsMatchPublishedSettings) {
    const AdaptationConfig c;
    EXPECT_DOUBLE_EQ(c.lambda_ia, 0.2);
    EXPECT_DOUBLE_EQ(c.lambda_pe, 0.5);
    EXPECT_DOUBLE_EQ(c.lambda_ps, 0.01);
    EXPECT_DOUBLE_EQ(c.lambda_im, 2.0);
    EXPECT_DOUBLE_EQ(c.alpha_ema, 1e-4);
    EXPECT_DOUBLE_EQ(c.lr, 1e-4);
    EXPECT_DOUBLE_EQ(c.lr_power, 0.9);
    EXPECT_DOUBLE_EQ(c.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c.weight_decay, 5e-4);
    EXPECT_EQ(c.batch_size, 6);
    EXPECT_DOUBLE_EQ(PretrainConfig{}.lr, 2.5e-4);
}

TEST(AdaptationConfig, TextRoundTrip) {
    AdaptationConfig c = AdaptationConfig::desk();
    c.importance_mode = ImportanceMode::SPL;
    c.prototype_mode = PrototypeMode::Momentum;
    c.ema_enabled = false;
    c.seed = 77;
    c.lambda_ps = 0.03;
    const auto back = parse_adaptation_config(to_config_text(c));
    EXPECT_EQ(to_config_text(back), to_config_text(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_NE(config_hash(back), config_hash(AdaptationConfig{}));
}

TEST(AdaptationConfig, CommentsAndWhitespace) {
    const auto c = parse_adaptation_config("# weights\n  lambda_im = 1.5  \n\nlr=0.01 # step\n");
    EXPECT_DOUBLE_EQ(c.lambda_im, 1.5);
    EXPECT_DOUBLE_EQ(c.lr, 0.01);
}

TEST(AdaptationConfig, UnknownKeyListsValidNames) {
    try {
        parse_adaptation_config("lambda_xx = 1\n");
        FAIL() << "expected ParameterError";
    } catch (const ParameterError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("lambda_xx"), std::string::npos);
        for (const auto& key : adaptation_config_keys()) EXPECT_NE(what.find(key), std::string::npos) << key;
    }
}

TEST(AdaptationConfig, ValidationErrors) {
    EXPECT_THROW(parse_adaptation_config("lambda_ia = -1\n"), ParameterError);
    EXPECT_THROW(parse_adaptation_config("alpha_ema = 2\n"), ParameterError);
    EXPECT_THROW(parse_adaptation_config("lr = abc\n"), ParameterError);
    EXPECT_THROW(parse_adaptation_config("batch_size = 0\n"), ParameterError);
    EXPECT_THROW(parse_adaptation_config("ema_enabled = maybe\n"), ParameterError);
    EXPECT_THROW(parse_adaptation_config("just words\n"), ParameterError);
}

TEST(PretrainConfig, TextRoundTripAndArch) {
    PretrainConfig c = PretrainConfig::desk();
    c.arch.num_classes = 7;
    c.seed = 3;
    const auto back = parse_pretrain_config(to_config_text(c));
    EXPECT_EQ(back.arch, c.arch);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_THROW(parse_pretrain_config("feature_stride = 3\n"), ParameterError);
    EXPECT_THROW(parse_pretrain_config("lambda_ia = 1\n"), ParameterError);
}

TEST(PolyLr, HandValues) {
    EXPECT_DOUBLE_EQ(poly_lr(1.0, 0, 100, 0.9), 1.0);
    EXPECT_NEAR(poly_lr(1.0, 50, 100, 0.9), std::pow(0.5, 0.9), 1e-15);
    EXPECT_DOUBLE_EQ(poly_lr(1.0, 100, 100, 0.9), 0.0);
    EXPECT_DOUBLE_EQ(poly_lr(2.0, 5, 0, 0.9), 2.0);
}

TEST(SgdMomentum, HandStep) {
    ArchDescriptor a = small_arch();
    SegmentationModel<double> m(a);
    for (auto& p : m.params()) std::fill(p.values.begin(), p.values.end(), 1.0);
    auto g = m.zero_grads();
    for (auto& v : g) std::fill(v.begin(), v.end(), 0.5);
    SgdMomentum<double> opt(0.9, 0.1);
    opt.step(m, g, 0.1);
    // v = 0.5 + 0.1 * 1 = 0.6; w = 1 - 0.06
    EXPECT_NEAR(m.params()[0].values[0], 0.94, 1e-15);
    opt.step(m, g, 0.1);
    // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134; w = 0.94 - 0.1134
    EXPECT_NEAR(m.params()[0].values[0], 0.8266, 1e-12);
}

TEST(TotalLoss, WeightedSumAndNonFinite) {
    EXPECT_NEAR(total_loss({1, 1, 1, 1}, loss_weights(AdaptationConfig{})), 2.71, 1e-12);
    try {
        total_loss({1, std::numeric_limits<double>::quiet_NaN(), 1, 1}, {1, 1, 1, 1}, 17);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("loss_pe"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
    }
}

TEST(TrainLog, CsvAndLookup) {
    TrainLog log({"step", "loss"});
    log.append({0, 1.5}, 0.25);
    log.append({1, 0.5}, 0.5);
    EXPECT_DOUBLE_EQ(log.value(1, "loss"), 0.5);
    EXPECT_THROW(log.value(0, "nope"), ParameterError);
    EXPECT_EQ(log.to_csv().rfind("step,loss\n", 0), 0u);
    EXPECT_NE(log.to_csv(true).find("wall_time"), std::string::npos);
    TrainLog other({"step", "loss"});
    other.append({0, 1.5}, 9.0);
    other.append({1, 0.5}, 9.0);
    EXPECT_TRUE(log.same_records(other));
}

TEST(Adapter, ZeroWeightsIsANoOp) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 1);
    auto cfg = quick_config();
    cfg.lambda_ia = cfg.lambda_pe = cfg.lambda_ps = cfg.lambda_im = 0;
    const auto r = adapt(src, small_target(), cfg);
    EXPECT_EQ(r.target, src);
    EXPECT_EQ(r.memory, src);
}

TEST(Adapter, SourceUntouchedAndDeterministic) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 2);
    const auto before = src.parameter_hash();
    const auto data = small_target();
    const auto a = adapt(src, data, quick_config());
    const auto b = adapt(src, data, quick_config());
    EXPECT_EQ(src.parameter_hash(), before);
    EXPECT_EQ(a.target, b.target);
    EXPECT_EQ(a.memory, b.memory);
    EXPECT_TRUE(a.log.same_records(b.log));
    EXPECT_NE(a.target, src);
    EXPECT_EQ(a.log.size(), 3u);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        for (double v : a.log.row(i)) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Adapter, LabelsAreNeverRead) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 3);
    const auto data = small_target();
    const auto with = adapt(src, data, quick_config());
    const auto without = adapt(src, strip_labels(data), quick_config());
    EXPECT_EQ(with.target, without.target);
}

TEST(Adapter, ArchitectureMismatchFailsBeforeTraining) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 1);
    ArchDescriptor other = small_arch();
    other.num_classes = 4;
    EXPECT_THROW(Adapter<float>(src, small_target(), quick_config(), other), ParameterError);
    EXPECT_THROW(Adapter<float>(src, Dataset{}, quick_config()), ParameterError);
}

TEST(Adapter, MemoryMovesAtMostAlphaOfTargetDisplacement) {
    const auto src = SegmentationModel<double>::initialized(small_arch(), 4);
    Adapter<double> run(src, small_target(), quick_config(1));
    run.step();
    const auto& t = run.models().target().params();
    const auto& m = run.models().memory().params();
    const auto& s = src.params();
    double dt = 0, dm = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t k = 0; k < s[i].values.size(); ++k) {
            dt += std::pow(t[i].values[k] - s[i].values[k], 2);
            dm += std::pow(m[i].values[k] - s[i].values[k], 2);
        }
    }
    ASSERT_GT(dt, 0.0);
    // Slack covers rounding in (1 - a) s + a t, which scales with |s|.
    EXPECT_LE(std::sqrt(dm), 1e-4 * std::sqrt(dt) * (1 + 1e-6));
}

TEST(Adapter, NoEmaMemoryFollowsTarget) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 5);
    auto cfg = quick_config(2);
    cfg.ema_enabled = false;
    const auto r = adapt(src, small_target(), cfg);
    EXPECT_EQ(r.memory, r.target);
}

TEST(Adapter, StaticPrototypesFrozenUpFront) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 6);
    auto cfg = quick_config(2);
    cfg.prototype_mode = PrototypeMode::Static;
    Adapter<float> run(src, small_target(), cfg);
    ASSERT_TRUE(run.prototypes().frozen());
    const auto frozen = run.prototypes().stored();
    run.step();
    run.step();
    EXPECT_EQ(run.prototypes().stored(), frozen);
}

TEST(Adapter, ModesRunAndDiffer) {
    const auto src = SegmentationModel<float>::initialized(small_arch(), 7);
    const auto data = small_target();
    auto base = quick_config(2);
    const auto a = adapt(src, data, base);
    base.importance_mode = ImportanceMode::RPL;
    const auto b = adapt(src, data, base);
    EXPECT_NE(a.target, b.target);
    base.prototype_mode = PrototypeMode::Momentum;
    EXPECT_NO_THROW(adapt(src, data, base));
    base.crop_h = base.crop_w = 8;
    EXPECT_NO_THROW(adapt(src, data, base));
}

TEST(Pretrain, LossDecreasesAndIsDeterministic) {
    PretrainConfig cfg;
    cfg.arch = small_arch();
    cfg.iterations = 40;
    cfg.batch_size = 2;
    cfg.lr = 0.02;
    const auto data = generate_scene_dataset(6, 3, 16, 16, {}, 1);
    const auto a = pretrain_source<float>(data, cfg);
    const auto b = pretrain_source<float>(data, cfg);
    EXPECT_EQ(a.model, b.model);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        first += a.log.value(i, "loss_ce");
        last += a.log.value(a.log.size() - 1 - i, "loss_ce");
    }
    EXPECT_LT(last, first);
}

TEST(Pretrain, RejectsUnlabeledData) {
    PretrainConfig cfg;
    cfg.arch = small_arch();
    cfg.iterations = 1;
    EXPECT_THROW(pretrain_source<float>(strip_labels(generate_scene_dataset(2, 3, 16, 16, {}, 1)), cfg),
                 PreconditionError);
}
