#include "stainforge/denoiser.hpp"

#include <gtest/gtest.h>

#include "reference.hpp"

using namespace stainforge;

namespace {

TEST(TimeEmbedding, ZeroTimestepPattern) {
    auto e = time_embedding<float>(0.0, 8);
    for (int i = 0; i < 4; ++i) {
        EXPECT_FLOAT_EQ(e.raw()[2 * i], 0.0f);      // sin 0
        EXPECT_FLOAT_EQ(e.raw()[2 * i + 1], 1.0f);  // cos 0
    }
}

TEST(TimeEmbedding, DistinctTimestepsDiffer) {
    auto e1 = time_embedding<float>(1, 16);
    auto e2 = time_embedding<float>(2, 16);
    double d = 0;
    for (int i = 0; i < 16; ++i) d += std::pow(e1.raw()[i] - e2.raw()[i], 2);
    EXPECT_GT(std::sqrt(d), 0.0);
}

TEST(TimeEmbedding, UnitBoundedEntries) {
    for (int t : {1, 10, 500, 1000}) {
        auto e = time_embedding<float>(t, 64);
        for (float v : e.data()) {
            EXPECT_GE(v, -1.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(TimeEmbedding, OddDimThrows) {
    EXPECT_THROW(time_embedding<float>(1, 7), ShapeError);
}

TEST(MarkerEmbedding, SingleMarkerPanelIsFixed) {
    MarkerCondition c{0, 1};
    auto a = marker_embedding<float>(c, 16);
    auto b = marker_embedding<float>(c, 16);
    EXPECT_EQ(std::vector<float>(a.data().begin(), a.data().end()),
              std::vector<float>(b.data().begin(), b.data().end()));
}

TEST(MarkerEmbedding, PairwiseDistinctOverEighteenMarkers) {
    // Orion-scale panel width.
    const int M = 18, dim = 64;
    std::vector<Tensor<float>> embs;
    for (int m = 0; m < M; ++m) embs.push_back(marker_embedding<float>({m, M}, dim));
    for (int i = 0; i < M; ++i)
        for (int j = i + 1; j < M; ++j) {
            double d = 0;
            for (int k = 0; k < dim; ++k) d += std::pow(embs[i].raw()[k] - embs[j].raw()[k], 2);
            EXPECT_GT(std::sqrt(d), 1e-6);
        }
}

TEST(MarkerEmbedding, OutOfRangeIndexThrows) {
    EXPECT_THROW(marker_embedding<float>({3, 2}, 16), DataError);
}

TEST(AdaptInputChannels, DuplicatedInputEquivalence) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto w = Tensor<float>::randn({4, 3, 3, 3}, rng);
        auto b = Tensor<float>::randn({4}, rng);
        auto u = Tensor<float>::randn({1, 3, 6, 6}, rng);
        auto adapted = adapt_input_channels(w);
        ASSERT_EQ(adapted.shape(), (Shape{4, 6, 3, 3}));
        auto uu = concat<float>({u, u}, 1);
        auto out_orig = conv2d(u, w, b, 1, 1);
        auto out_adapt = conv2d(uu, adapted, b, 1, 1);
        for (int64_t i = 0; i < out_orig.numel(); ++i)
            ASSERT_NEAR(out_adapt.raw()[i], out_orig.raw()[i], 1e-5);
    }
}

TEST(AdaptInputChannels, ZeroWeightStaysZero) {
    auto z = adapt_input_channels(Tensor<float>::zeros({2, 3, 3, 3}));
    for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(AdaptInputChannels, PerOutputChannelSumsPreserved) {
    Rng rng(5);
    auto w = Tensor<float>::randn({4, 2, 3, 3}, rng);
    auto a = adapt_input_channels(w);
    for (int co = 0; co < 4; ++co) {
        double s0 = 0, s1 = 0;
        for (int i = 0; i < 2 * 9; ++i) s0 += w.raw()[co * 18 + i];
        for (int i = 0; i < 4 * 9; ++i) s1 += a.raw()[co * 36 + i];
        EXPECT_NEAR(s0, s1, 1e-5);
    }
}

TEST(InitParams, SeedDeterminismAndZeroInitialOutput) {
    auto p1 = init_params<float>(3, 8, 32, 42);
    auto p2 = init_params<float>(3, 8, 32, 42);
    std::vector<float> v1, v2;
    p1.for_each_param([&](const std::string&, Tensor<float>& t) {
        v1.insert(v1.end(), t.data().begin(), t.data().end());
    });
    p2.for_each_param([&](const std::string&, Tensor<float>& t) {
        v2.insert(v2.end(), t.data().begin(), t.data().end());
    });
    EXPECT_EQ(v1, v2);

    Rng rng(7);
    auto x = Tensor<float>::randn({3, 8, 8}, rng);
    auto z = Tensor<float>::randn({3, 8, 8}, rng);
    auto out = denoiser_forward(p1, x, z, 1, {0, 1});
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(InitParams, InvalidWidthThrows) {
    EXPECT_THROW(init_params<float>(3, 4, 32, 1), DataError);
    EXPECT_THROW(init_params<float>(3, 12, 32, 1), DataError);
}

// Layer-by-layer hand count of the parameter formula for C_lat=4, w=32.
TEST(InitParams, ParameterCountMatchesAnalyticFormula) {
    const int64_t c = 4, w = 32, d = 128;
    auto conv_n = [](int64_t co, int64_t ci, int64_t k) { return co * ci * k * k + co; };
    auto dense_n = [](int64_t in, int64_t out) { return in * out + out; };
    auto norm_n = [](int64_t ch) { return 2 * ch; };
    auto block_n = [&](int64_t ci, int64_t co) {
        int64_t n = norm_n(ci) + conv_n(co, ci, 3) + dense_n(d, co) + norm_n(co) + conv_n(co, co, 3);
        if (ci != co) n += conv_n(co, ci, 1);
        return n;
    };
    int64_t expect = conv_n(w, 2 * c, 3)            // input projection
                     + 3 * dense_n(d, d)            // marker projection + 2-layer time MLP
                     + block_n(w, w) * 2            // enc level 0
                     + conv_n(w, w, 3)              // down 0
                     + block_n(w, 2 * w) + block_n(2 * w, 2 * w)
                     + conv_n(2 * w, 2 * w, 3)      // down 1
                     + block_n(2 * w, 4 * w) + block_n(4 * w, 4 * w)
                     + block_n(4 * w, 4 * w) * 2    // middle
                     + block_n(8 * w, 4 * w) * 2    // dec level 2
                     + conv_n(2 * w, 4 * w, 3)      // up 1
                     + block_n(4 * w, 2 * w) * 2    // dec level 1
                     + conv_n(w, 2 * w, 3)          // up 0
                     + block_n(2 * w, w) * 2        // dec level 0
                     + norm_n(w)                    // output norm
                     + conv_n(c, w, 3);             // output projection
    auto p = init_params<float>(c, w, d, 1);
    EXPECT_EQ(p.parameter_count(), expect);
}

TEST(Forward, ShapeContractAndPurity) {
    auto p = init_params<float>(3, 8, 32, 11);
    Rng rng(13);
    auto x = Tensor<float>::randn({3, 16, 16}, rng);
    auto z = Tensor<float>::randn({3, 16, 16}, rng);
    auto o1 = denoiser_forward(p, x, z, 500, {1, 3});
    EXPECT_EQ(o1.shape(), x.shape());
    auto o2 = denoiser_forward(p, x, z, 500, {1, 3});
    EXPECT_EQ(std::vector<float>(o1.data().begin(), o1.data().end()),
              std::vector<float>(o2.data().begin(), o2.data().end()));
}

TEST(Forward, MarkerConditionChangesOutput) {
    auto p = init_params<float>(3, 8, 32, 17);
    // The zero-initialized output conv hides conditioning; randomize it the
    // way a fully random net would be.
    Rng wrng(18);
    p.out_conv.w = Tensor<float>::randn(p.out_conv.w.shape(), wrng, 0.05);
    Rng rng(19);
    auto x = Tensor<float>::randn({3, 8, 8}, rng);
    auto z = Tensor<float>::randn({3, 8, 8}, rng);
    auto a = denoiser_forward(p, x, z, 100, {0, 4});
    auto b = denoiser_forward(p, x, z, 100, {1, 4});
    double d = 0;
    for (int64_t i = 0; i < a.numel(); ++i) d += std::pow(a.raw()[i] - b.raw()[i], 2);
    EXPECT_GT(std::sqrt(d), 0.0);
}

TEST(Forward, AllZeroParamsGiveZeroOutput) {
    auto p = init_params<float>(3, 8, 32, 21);
    p.for_each_param([](const std::string&, Tensor<float>& t) {
        std::fill(t.data().begin(), t.data().end(), 0.0f);
    });
    Rng rng(23);
    auto x = Tensor<float>::randn({3, 8, 8}, rng);
    auto z = Tensor<float>::randn({3, 8, 8}, rng);
    auto out = denoiser_forward(p, x, z, 7, {0, 2});
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, ShapeAndTimestepErrors) {
    auto p = init_params<float>(3, 8, 32, 25);
    auto x = Tensor<float>::zeros({3, 8, 8});
    EXPECT_THROW(denoiser_forward(p, x, Tensor<float>::zeros({3, 8, 4}), 1, {0, 1}), ShapeError);
    EXPECT_THROW(denoiser_forward(p, x, x, 0, {0, 1}), DataError);
    EXPECT_THROW(denoiser_forward(p, Tensor<float>::zeros({3, 6, 6}),
                                  Tensor<float>::zeros({3, 6, 6}), 1, {0, 1}),
                 ShapeError);
}

// Reduced-coordinate gradient check of the full miniature net; the
// acceptance suite runs the exhaustive version.
TEST(Forward, MiniatureNetGradientsMatchFiniteDifference) {
    auto p = init_params<double>(3, 8, 32, 27);
    Rng wrng(28);
    p.out_conv.w = Tensor<double>::randn(p.out_conv.w.shape(), wrng, 0.05);
    Rng rng(29);
    auto x = Tensor<double>::randn({1, 3, 8, 8}, rng);
    auto z = Tensor<double>::randn({1, 3, 8, 8}, rng);
    auto target = Tensor<double>::randn({1, 3, 8, 8}, rng);

    std::vector<Tensor<double>> inputs = {x, z, p.mid[0].conv1.w, p.enc[0][0].emb.w,
                                          p.dec[0][1].norm1.gain, p.out_conv.w, p.marker_proj.w};
    double err = reference::gradcheck_max_rel_err(
        [&](const auto& xs) {
            using U = std::decay_t<decltype(xs[0].item())>;
            DenoiserParams<U> net;
            if constexpr (std::is_same_v<U, double>) {
                net = p;
                net.mid[0].conv1.w = xs[2];
                net.enc[0][0].emb.w = xs[3];
                net.dec[0][1].norm1.gain = xs[4];
                net.out_conv.w = xs[5];
                net.marker_proj.w = xs[6];
            }
            std::array<int, 1> ts = {400};
            std::array<MarkerCondition, 1> cs = {MarkerCondition{1, 3}};
            auto t = reference::cast_tensor<U>(target);
            auto out = denoiser_forward_batch(net, xs[0], xs[1], ts, cs);
            return reduce_mean(square(sub(out, t)));
        },
        inputs, {}, 10);
    EXPECT_LT(err, 1e-6);
}

}  // namespace
