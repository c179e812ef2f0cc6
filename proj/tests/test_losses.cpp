#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace iapc;
using namespace iapc::testing;

namespace {

ProbMap<double> probs_1x1(std::vector<double> p) {
    ProbMap<double> m(1, 1, static_cast<int>(p.size()));
    for (std::size_t c = 0; c < p.size(); ++c) m(0, 0, static_cast<int>(c)) = p[c];
    return m;
}

/// Logits whose softmax is exactly p (p strictly positive).
LogitMap<double> logits_for(const std::vector<std::vector<double>>& pixels, int h, int w) {
    LogitMap<double> z(h, w, static_cast<int>(pixels[0].size()));
    for (int i = 0; i < z.pixels(); ++i) {
        for (int c = 0; c < z.channels(); ++c) z.pixel(i)[static_cast<std::size_t>(c)] = std::log(pixels[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
    }
    return z;
}

}  // namespace

TEST(Softmax, HandValue) {
    LogitMap<double> z(1, 1, 3);
    z(0, 0, 0) = std::log(2.0);
    const auto p = softmax(z);
    EXPECT_NEAR(p(0, 0, 0), 0.5, 1e-12);
    EXPECT_NEAR(p(0, 0, 1), 0.25, 1e-12);
    EXPECT_NEAR(p(0, 0, 2), 0.25, 1e-12);
}

TEST(Softmax, LargeLogitsStayFinite) {
    LogitMap<float> z(1, 1, 2);
    z(0, 0, 0) = 1000.0f;
    z(0, 0, 1) = -1000.0f;
    const auto p = softmax(z);
    EXPECT_FLOAT_EQ(p(0, 0, 0), 1.0f);
    EXPECT_FLOAT_EQ(p(0, 0, 1), 0.0f);
}

TEST(Softmax, NonFiniteThrows) {
    LogitMap<double> z(1, 1, 2);
    z(0, 0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(softmax(z), NumericError);
}

TEST(Softmax, RowsSumToOne) {
    std::mt19937_64 rng(1);
    const auto p = softmax(random_logits<double>(rng, 5, 4, 7, 20.0));
    EXPECT_NO_THROW(check_prob_map(p, 1e-12));
}

TEST(PseudoLabel, TiesGoToLowestIndex) {
    const auto y = pseudo_label(probs_1x1({0.4, 0.4, 0.2}));
    EXPECT_EQ(y.index(0), 0);
    const auto y2 = pseudo_label(probs_1x1({0.2, 0.4, 0.4}));
    EXPECT_EQ(y2.index(0), 1);
}

TEST(Importance, HandValues) {
    EXPECT_NEAR(importance_map(probs_1x1({0.6, 0.3, 0.1}))[0], 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(importance_map(probs_1x1({1.0, 0.0, 0.0}))[0], 1.0);
    EXPECT_DOUBLE_EQ(importance_map(probs_1x1({0.45, 0.45, 0.1}))[0], 0.0);
}

TEST(Importance, AlternativeModes) {
    const auto p = probs_1x1({0.6, 0.3, 0.1});
    EXPECT_DOUBLE_EQ(importance_map(p, ImportanceMode::RPL)[0], 1.0);
    EXPECT_DOUBLE_EQ(importance_map(p, ImportanceMode::FPL)[0], 0.6);
    EXPECT_DOUBLE_EQ(importance_map(p, ImportanceMode::SPL)[0], 0.7);
}

TEST(Importance, ModeNamesRoundTrip) {
    for (auto m : {ImportanceMode::IAPC, ImportanceMode::RPL, ImportanceMode::FPL, ImportanceMode::SPL}) {
        EXPECT_EQ(parse_importance_mode(to_string(m)), m);
    }
    EXPECT_EQ(parse_importance_mode("RPL"), ImportanceMode::RPL);
    EXPECT_THROW(parse_importance_mode("soft"), ParameterError);
}

TEST(Importance, AllZeroPixelThrows) {
    EXPECT_THROW(importance_map(probs_1x1({0.0, 0.0})), NumericError);
}

TEST(Importance, PropertiesOnRandomDistributions) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const int C = std::uniform_int_distribution<int>(2, 19)(rng);
        const auto d = random_distribution(rng, C);
        const double w = importance_map(probs_1x1(d))[0];
        EXPECT_GE(w, 0.0);
        EXPECT_LE(w, 1.0);
        EXPECT_NEAR(w, oracle::importance(d), 1e-12);
    }
}

TEST(LossIA, HandValue) {
    // Two pixels: the first has p_t[y_hat] = 0.5 at weight 1, the second weight 0.
    const auto z = logits_for({{0.5, 0.25, 0.25}, {0.2, 0.7, 0.1}}, 1, 2);
    LabelMap idx(1, 2);
    idx[0] = 0;
    idx[1] = 1;
    ImportanceMap<double> w(1, 2);
    w[0] = 1.0;
    w[1] = 0.0;
    const auto r = loss_ia(z, OneHotMap(idx, 3), w);
    EXPECT_NEAR(r.value, 0.34657359, 1e-6);
}

TEST(LossIA, IgnoredPixelsLeaveNormalizer) {
    const auto z = logits_for({{0.5, 0.5}, {0.9, 0.1}}, 1, 2);
    LabelMap idx(1, 2, 0);
    ImportanceMap<double> w(1, 2, 1.0);
    PixelMask ignore(1, 2, 0);
    ignore[1] = 1;
    const auto r = loss_ia(z, OneHotMap(idx, 2), w, &ignore);
    EXPECT_NEAR(r.value, std::log(2.0), 1e-6);
    EXPECT_EQ(r.grad_logits(0, 1, 0), 0.0);
    EXPECT_EQ(r.grad_logits(0, 1, 1), 0.0);
    ignore[0] = 1;
    const auto all = loss_ia(z, OneHotMap(idx, 2), w, &ignore);
    EXPECT_EQ(all.value, 0.0);
    EXPECT_FALSE(all.warning.empty());
}

TEST(LossIA, ZeroImportanceContributesNothing) {
    std::mt19937_64 rng(3);
    const auto z = random_logits<double>(rng, 3, 3, 4);
    const auto y = pseudo_label(softmax(z));
    const ImportanceMap<double> w(3, 3, 0.0);
    const auto r = loss_ia(z, y, w);
    EXPECT_EQ(r.value, 0.0);
    for (auto g : r.grad_logits.values()) EXPECT_EQ(g, 0.0);
}

TEST(LossIM, HandValues) {
    EXPECT_NEAR(loss_im_value(probs_1x1({0.5, 0.25, 0.25})), 1.0397208, 1e-6);
    EXPECT_NEAR(loss_im_value(probs_1x1({0.25, 0.25, 0.25, 0.25})), std::log(4.0), 1e-6);
    EXPECT_NEAR(loss_im_value(probs_1x1({1.0, 0.0})), 0.0, 1e-7);  // log epsilon
}

TEST(LossIM, ValueMatchesGradientForm) {
    std::mt19937_64 rng(5);
    const auto z = random_logits<double>(rng, 4, 3, 5);
    EXPECT_NEAR(loss_im(z).value, loss_im_value(softmax(z)), 1e-12);
}

TEST(Gradients, LossIAMatchesFiniteDifference) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        auto z = random_logits<double>(rng, 4, 4, 3);
        const auto p_hat = random_probs<double>(rng, 4, 4, 3);
        const auto y = pseudo_label(p_hat);
        const auto w = importance_map(p_hat);
        const auto analytic = to_vector(loss_ia(z, y, w).grad_logits);
        const auto numeric = numeric_gradient(z, [&] { return loss_ia_value(softmax(z), y, w); });
        EXPECT_LT(relative_error(analytic, numeric), 1e-4);
    }
}

TEST(Gradients, LossIMMatchesFiniteDifference) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        auto z = random_logits<double>(rng, 4, 4, 3);
        const auto analytic = to_vector(loss_im(z).grad_logits);
        const auto numeric = numeric_gradient(z, [&] { return loss_im_value(softmax(z)); });
        EXPECT_LT(relative_error(analytic, numeric), 1e-4);
    }
}

TEST(CrossEntropy, NonPositiveNormalizerWarns) {
    const auto p = probs_1x1({0.5, 0.5});
    const LabelMap t(1, 1, 0);
    const auto r = weighted_cross_entropy<double>(p, t, nullptr, 0.0);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_FALSE(r.warning.empty());
}
