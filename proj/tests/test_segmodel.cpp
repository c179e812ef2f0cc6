#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace iapc;
using namespace iapc::testing;
namespace fs = std::filesystem;

namespace {

ArchDescriptor tiny_arch() {
    ArchDescriptor a;
    a.base_width = 3;
    a.feature_dim = 4;
    a.feature_stride = 2;
    a.num_classes = 3;
    return a;
}

Image random_image(std::mt19937_64& rng, int h, int w) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(h, w, 3);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
    return img;
}

template <typename T>
double dot(const Tensor3<T>& a, const Tensor3<T>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * static_cast<double>(b.data()[i]);
    return s;
}

fs::path temp_path(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "iapc_test_segmodel";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Upsample, AlignCornersFalseHandValues) {
    Tensor3<double> in(1, 2, 1);
    in(0, 0, 0) = 0.0;
    in(0, 1, 0) = 1.0;
    const auto out = upsample_bilinear(in, 1, 4);
    // Source coordinates (x + 0.5) / 2 - 0.5: -0.25, 0.25, 0.75, 1.25 (edges clamp).
    EXPECT_DOUBLE_EQ(out(0, 0, 0), 0.0);
    EXPECT_DOUBLE_EQ(out(0, 1, 0), 0.25);
    EXPECT_DOUBLE_EQ(out(0, 2, 0), 0.75);
    EXPECT_DOUBLE_EQ(out(0, 3, 0), 1.0);
}

TEST(Upsample, IdentityAtSameSize) {
    std::mt19937_64 rng(1);
    const auto in = random_features<double>(rng, 3, 5, 2);
    const auto out = upsample_bilinear(in, 3, 5);
    for (std::size_t i = 0; i < in.size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], in.data()[i]);
}

TEST(Upsample, BackwardIsAdjoint) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const auto x = random_features<double>(rng, 3, 4, 2);
        const auto y = random_features<double>(rng, 11, 13, 2);
        EXPECT_NEAR(dot(upsample_bilinear(x, 11, 13), y), dot(x, upsample_bilinear_backward(y, 3, 4)), 1e-10);
    }
}

TEST(SegmentationModel, ForwardShapes) {
    const auto m = SegmentationModel<float>::initialized(ArchDescriptor{}, 1);
    std::mt19937_64 rng(3);
    const auto out = m.forward(random_image(rng, 64, 64));
    EXPECT_EQ(out.features.height(), 16);
    EXPECT_EQ(out.features.width(), 16);
    EXPECT_EQ(out.features.channels(), 32);
    EXPECT_EQ(out.logits_feat.channels(), 5);
    EXPECT_EQ(out.logits.height(), 64);
    EXPECT_EQ(out.logits.width(), 64);
}

TEST(SegmentationModel, OddSizesAndStrides) {
    std::mt19937_64 rng(4);
    for (int stride : {1, 2, 4, 8}) {
        ArchDescriptor a = tiny_arch();
        a.feature_stride = stride;
        const auto m = SegmentationModel<float>::initialized(a, 2);
        const auto out = m.forward(random_image(rng, 19, 23));
        EXPECT_EQ(out.features.height(), a.feature_extent(19));
        EXPECT_EQ(out.features.width(), a.feature_extent(23));
        EXPECT_EQ(out.logits.height(), 19);
        EXPECT_EQ(out.logits.width(), 23);
    }
}

TEST(SegmentationModel, InvalidArchitectureThrows) {
    ArchDescriptor a;
    a.feature_stride = 3;
    EXPECT_THROW(SegmentationModel<float>{a}, ParameterError);
    a = {};
    a.num_classes = 1;
    EXPECT_THROW(SegmentationModel<float>{a}, ParameterError);
}

TEST(SegmentationModel, WrongChannelCountThrows) {
    const auto m = SegmentationModel<float>::initialized(tiny_arch(), 1);
    EXPECT_THROW(m.forward(Image(8, 8, 1)), ParameterError);
}

TEST(SegmentationModel, InitializationIsSeeded) {
    const auto a = SegmentationModel<float>::initialized(tiny_arch(), 5);
    const auto b = SegmentationModel<float>::initialized(tiny_arch(), 5);
    const auto c = SegmentationModel<float>::initialized(tiny_arch(), 6);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
    EXPECT_NE(a.parameter_hash(), c.parameter_hash());
}

TEST(SegmentationModel, ZeroHeadGivesUniformPrediction) {
    auto m = SegmentationModel<double>::initialized(tiny_arch(), 1);
    m.zero_head();
    std::mt19937_64 rng(6);
    const auto p = softmax(m.forward(random_image(rng, 8, 8)).logits);
    for (auto v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

// Parameter gradients of <G1, logits> + <G2, logits_feat> + <G3, features>
// against central differences, in double precision.
TEST(SegmentationModel, BackwardMatchesFiniteDifference) {
    std::mt19937_64 rng(7);
    auto m = SegmentationModel<double>::initialized(tiny_arch(), 3);
    for (auto& p : m.params()) {
        if (p.name.find("bias") != std::string::npos) {
            for (auto& v : p.values) v = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
        }
    }
    const Image img = random_image(rng, 7, 6);
    ForwardCache<double> cache;
    const auto out = m.forward(img, &cache);
    const auto g1 = random_features<double>(rng, out.logits.height(), out.logits.width(), out.logits.channels());
    const auto g2 = random_features<double>(rng, out.logits_feat.height(), out.logits_feat.width(), 3);
    const auto g3 = random_features<double>(rng, out.features.height(), out.features.width(), 4);
    auto objective = [&] {
        const auto o = m.forward(img);
        return dot(o.logits, g1) + dot(o.logits_feat, g2) + dot(o.features, g3);
    };
    auto grads = m.zero_grads();
    m.backward(cache, &g1, &g2, &g3, grads);
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        auto& values = m.params()[i].values;
        std::vector<double> numeric(values.size());
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double keep = values[k];
            values[k] = keep + 1e-6;
            const double up = objective();
            values[k] = keep - 1e-6;
            const double down = objective();
            values[k] = keep;
            numeric[k] = (up - down) / 2e-6;
        }
        EXPECT_LT(relative_error(grads[i], numeric), 1e-5) << m.params()[i].name;
    }
}

TEST(SegmentationModel, BackwardAccumulates) {
    std::mt19937_64 rng(8);
    const auto m = SegmentationModel<double>::initialized(tiny_arch(), 3);
    const Image img = random_image(rng, 8, 8);
    ForwardCache<double> cache;
    const auto out = m.forward(img, &cache);
    const auto g = random_features<double>(rng, 8, 8, 3);
    auto once = m.zero_grads();
    m.backward(cache, &g, nullptr, nullptr, once);
    auto twice = m.zero_grads();
    m.backward(cache, &g, nullptr, nullptr, twice);
    m.backward(cache, &g, nullptr, nullptr, twice);
    for (std::size_t i = 0; i < once.size(); ++i) {
        for (std::size_t k = 0; k < once[i].size(); ++k) EXPECT_NEAR(twice[i][k], 2 * once[i][k], 1e-12);
    }
}

TEST(Ema, FixedPointBoundaryAndConvexity) {
    const auto t = SegmentationModel<double>::initialized(tiny_arch(), 1);
    auto m = SegmentationModel<double>::initialized(tiny_arch(), 2);
    const auto m0 = m;

    auto same = t;
    ema_update(same, t, 0.3);
    EXPECT_EQ(same, t);

    auto copy = m;
    ema_update(copy, t, 1.0);
    EXPECT_EQ(copy, t);

    auto frozen = m;
    ema_update(frozen, t, 0.0);
    EXPECT_EQ(frozen, m0);

    ema_update(m, t, 0.25);
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        for (std::size_t k = 0; k < m.params()[i].values.size(); ++k) {
            const double a = m0.params()[i].values[k], b = t.params()[i].values[k];
            const double v = m.params()[i].values[k];
            EXPECT_GE(v, std::min(a, b));
            EXPECT_LE(v, std::max(a, b));
            EXPECT_NEAR(v, 0.75 * a + 0.25 * b, 1e-15);
        }
    }
}

TEST(Ema, SmallAlphaHandValue) {
    SegmentationModel<double> memory(tiny_arch());
    SegmentationModel<double> target(tiny_arch());
    for (auto& p : target.params()) std::fill(p.values.begin(), p.values.end(), 1.0);
    ema_update(memory, target, 1e-4);
    for (const auto& p : memory.params()) {
        for (double v : p.values) EXPECT_DOUBLE_EQ(v, 1e-4);
    }
}

TEST(Ema, RejectsBadAlphaAndMismatch) {
    auto a = SegmentationModel<double>::initialized(tiny_arch(), 1);
    const auto b = a;
    EXPECT_THROW(ema_update(a, b, 1.5), ParameterError);
    EXPECT_THROW(ema_update(a, b, -0.1), ParameterError);
    const SegmentationModel<double> other(ArchDescriptor{});
    EXPECT_THROW(ema_update(a, other, 0.5), ParameterError);
}

TEST(ModelTriplet, StartsAsCopies) {
    const auto s = SegmentationModel<float>::initialized(tiny_arch(), 9);
    ModelTriplet<float> t(s);
    EXPECT_EQ(t.source(), s);
    EXPECT_EQ(t.target(), s);
    EXPECT_EQ(t.memory(), s);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto m = SegmentationModel<float>::initialized(ArchDescriptor{}, 11);
    const auto path = temp_path("round.ckpt");
    save_checkpoint(path, m, 42, 0xabcdef);
    const auto ck = load_checkpoint<float>(path);
    EXPECT_EQ(ck.model, m);
    EXPECT_EQ(ck.step, 42u);
    EXPECT_EQ(ck.config_hash, 0xabcdefu);
    const auto wide = load_checkpoint<double>(path);
    EXPECT_EQ(wide.model.params()[0].values[3], static_cast<double>(m.params()[0].values[3]));
}

TEST(Checkpoint, BadFilesRaiseLoadError) {
    EXPECT_THROW(load_checkpoint<float>(temp_path("missing.ckpt")), LoadError);
    {
        std::ofstream out(temp_path("junk.ckpt"), std::ios::binary);
        out << "definitely not a checkpoint";
    }
    EXPECT_THROW(load_checkpoint<float>(temp_path("junk.ckpt")), LoadError);

    const auto m = SegmentationModel<float>::initialized(tiny_arch(), 1);
    const auto path = temp_path("trunc.ckpt");
    save_checkpoint(path, m);
    fs::resize_file(path, fs::file_size(path) - 5);
    EXPECT_THROW(load_checkpoint<float>(path), LoadError);
}

TEST(ExportTensor, WritesBinaryAndSidecar) {
    std::mt19937_64 rng(12);
    const auto t = random_features<float>(rng, 2, 3, 4);
    const auto stem = temp_path("feat");
    export_tensor(stem, t, "scene_00001", "features");
    EXPECT_EQ(fs::file_size(stem.string() + ".bin"), t.size() * sizeof(float));
    std::ifstream meta(stem.string() + ".json");
    const auto j = nlohmann::json::parse(meta);
    EXPECT_EQ(j["shape"], nlohmann::json({2, 3, 4}));
    EXPECT_EQ(j["dtype"], "float32");
    EXPECT_EQ(j["id"], "scene_00001");
}
