#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace iapc;
using namespace iapc::testing;

namespace {

LabelMap labels(std::initializer_list<int> v, int h, int w) {
    LabelMap m(h, w);
    int i = 0;
    for (int x : v) m[i++] = static_cast<std::uint8_t>(x);
    return m;
}

}  // namespace

TEST(Confusion, HandValuesAndIoU) {
    // gt:   0 0 0 0 1 1 1 1
    // pred: 0 0 0 1 0 1 1 1  -> [[3,1],[1,3]], IoU 3/5 for both classes
    const auto gt = labels({0, 0, 0, 0, 1, 1, 1, 1}, 2, 4);
    const auto pred = labels({0, 0, 0, 1, 0, 1, 1, 1}, 2, 4);
    const auto cm = confusion_matrix(pred, gt, 2);
    EXPECT_EQ(cm.at(0, 0), 3);
    EXPECT_EQ(cm.at(0, 1), 1);
    EXPECT_EQ(cm.at(1, 0), 1);
    EXPECT_EQ(cm.at(1, 1), 3);
    const auto r = compute_metrics(cm);
    EXPECT_DOUBLE_EQ(*r.iou[0], 0.6);
    EXPECT_DOUBLE_EQ(*r.iou[1], 0.6);
    EXPECT_DOUBLE_EQ(r.miou, 0.6);
    EXPECT_EQ(r.n_pixels, 8);
}

TEST(Confusion, IgnoredPixelsAreSkipped) {
    auto gt = labels({0, 1, 1, 0}, 2, 2);
    gt[3] = kIgnoreLabel;
    const auto pred = labels({0, 1, 0, 1}, 2, 2);
    const auto cm = confusion_matrix(pred, gt, 2);
    EXPECT_EQ(cm.total(), 3);
}

TEST(Confusion, ShapeAndRangeErrors) {
    EXPECT_THROW(confusion_matrix(LabelMap(2, 2), LabelMap(2, 3), 2), ParameterError);
    EXPECT_THROW(confusion_matrix(labels({0, 0, 0, 3}, 2, 2), LabelMap(2, 2, 0), 2), ValidationError);
    EXPECT_THROW(confusion_matrix(LabelMap(2, 2, 0), labels({0, 0, 0, 3}, 2, 2), 2), ValidationError);
}

TEST(Metrics, AbsentClassIsExcludedFromMean) {
    const auto gt = labels({0, 0, 1, 1}, 2, 2);
    const auto cm = confusion_matrix(gt, gt, 3);
    const auto r = compute_metrics(cm);
    EXPECT_FALSE(r.iou[2].has_value());
    EXPECT_DOUBLE_EQ(r.miou, 1.0);
}

TEST(Metrics, AllIgnoredIsUndefined) {
    EXPECT_THROW(compute_metrics(ConfusionMatrix(3)), ValidationError);
}

TEST(Metrics, PerfectAndDisjoint) {
    const auto gt = labels({0, 1, 2, 0}, 2, 2);
    EXPECT_DOUBLE_EQ(compute_metrics(confusion_matrix(gt, gt, 3)).miou, 1.0);
    const auto wrong = labels({1, 2, 0, 1}, 2, 2);
    EXPECT_DOUBLE_EQ(compute_metrics(confusion_matrix(wrong, gt, 3)).miou, 0.0);
}

TEST(Confusion, MatchesBruteForceOracle) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const int C = std::uniform_int_distribution<int>(2, 6)(rng);
        auto gt = random_labels(rng, 5, 7, C);
        const auto pred = random_labels(rng, 5, 7, C);
        gt[trial % gt.pixels()] = kIgnoreLabel;
        const auto cm = confusion_matrix(pred, gt, C);
        for (int g = 0; g < C; ++g) {
            for (int p = 0; p < C; ++p) {
                std::int64_t n = 0;
                for (int y = 0; y < 5; ++y) {
                    for (int x = 0; x < 7; ++x) n += (gt(y, x) == g && pred(y, x) == p) ? 1 : 0;
                }
                EXPECT_EQ(cm.at(g, p), n);
            }
        }
    }
}

TEST(Reports, JsonAndTable) {
    const auto gt = labels({0, 0, 0, 0, 1, 1, 1, 1}, 2, 4);
    const auto pred = labels({0, 0, 0, 1, 0, 1, 1, 1}, 2, 4);
    auto r = compute_metrics(confusion_matrix(pred, gt, 3));
    const auto j = to_json(r);
    EXPECT_DOUBLE_EQ(j["miou"].get<double>(), 0.6);
    EXPECT_TRUE(j["iou"][2].is_null());
    EXPECT_EQ(j["confusion"][0][1].get<int>(), 1);
    const auto text = to_text_table(r);
    EXPECT_NE(text.find("60.00"), std::string::npos);
    EXPECT_NE(text.find("n/a"), std::string::npos);
}

TEST(Margins, SummaryHandValues) {
    std::vector<MarginSample> s{{0.8, 0.1, 0.875, true}, {0.6, 0.2, 2.0 / 3.0, true}, {0.5, 0.4, 0.2, false}};
    const auto st = summarize_margins(s);
    EXPECT_EQ(st.correct_count, 2);
    EXPECT_EQ(st.wrong_count, 1);
    EXPECT_DOUBLE_EQ(*st.mean_p1_correct, 0.7);
    EXPECT_NEAR(*st.mean_importance_correct, (0.875 + 2.0 / 3.0) / 2, 1e-15);
    EXPECT_DOUBLE_EQ(*st.mean_p2_wrong, 0.4);
    const auto csv = margin_csv(st);
    EXPECT_EQ(csv.rfind("group,count,mean_p1,mean_p2,mean_importance\n", 0), 0u);
}

TEST(Margins, EmptyGroupStaysEmpty) {
    const auto st = summarize_margins({{0.9, 0.05, 0.9444, true}});
    EXPECT_FALSE(st.mean_p1_wrong.has_value());
    EXPECT_TRUE(to_json(st)["mean_p1_wrong"].is_null());
    EXPECT_NE(margin_csv(st).find("wrong,0,,,"), std::string::npos);
}

TEST(Margins, SamplingIsSeededAndBounded) {
    ArchDescriptor a;
    a.base_width = 4;
    a.feature_dim = 4;
    a.num_classes = 3;
    const auto m = SegmentationModel<float>::initialized(a, 1);
    const auto data = generate_scene_dataset(2, 3, 16, 16, {}, 0);
    const auto x = sample_margin_pixels(m, data, 50, 3);
    const auto y = sample_margin_pixels(m, data, 50, 3);
    ASSERT_EQ(x.size(), y.size());
    EXPECT_LE(x.size(), 100u);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].p1, y[i].p1);
    for (const auto& s : x) EXPECT_NEAR(s.importance, 1.0 - s.p2 / s.p1, 1e-6);
}

TEST(ImportanceGray, Scaling) {
    ImportanceMap<float> w(1, 3);
    w[0] = 0.0f;
    w[1] = 0.5f;
    w[2] = 1.0f;
    const auto g = importance_to_gray(w);
    EXPECT_EQ(g[0], 0);
    EXPECT_EQ(g[1], 128);
    EXPECT_EQ(g[2], 255);
}

TEST(Evaluate, UnlabeledSampleIsRejected) {
    ArchDescriptor a;
    a.num_classes = 3;
    const auto m = SegmentationModel<float>::initialized(a, 1);
    auto data = generate_scene_dataset(1, 3, 16, 16, {}, 0);
    data[0].label = LabelMap();
    EXPECT_THROW(evaluate(m, data), PreconditionError);
}
