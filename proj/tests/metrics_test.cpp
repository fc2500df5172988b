#include "stainforge/metrics.hpp"

#include <gtest/gtest.h>

#include "reference.hpp"

using namespace stainforge;

namespace {

Image random_image(int h, int w, Rng& rng) {
    Image im = Image::zeros(1, h, w);
    for (float& v : im.pix) v = static_cast<float>(rng.uniform());
    return im;
}

TEST(Ssim, IdenticalImagesGiveExactlyOne) {
    Rng rng(1);
    Image a = random_image(24, 24, rng);
    EXPECT_EQ(ssim(a, a, 1.0), 1.0);
}

TEST(Ssim, InvertedHalfHalfImageIsNegative) {
    Image a = Image::zeros(1, 32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 16; x < 32; ++x) a.at(0, y, x) = 1.0f;
    Image b = a;
    for (float& v : b.pix) v = 1.0f - v;
    double s = ssim(a, b, 1.0);
    EXPECT_LT(s, 0.0);
    EXPECT_NEAR(s, reference::ssim_direct(a, b, 1.0), 1e-9);
}

TEST(Ssim, EmptyArrayExclusionTrigger) {
    Image zeros = Image::zeros(1, 32, 32);
    // All-background patch: SSIM vs the empty array is 1 -> excluded at 0.8.
    EXPECT_GT(ssim(zeros, zeros, 1.0), 0.8);
    // Strong-signal patch stays below the trigger.
    Rng rng(5);
    Image signal = random_image(32, 32, rng);
    EXPECT_LT(ssim(signal, zeros, 1.0), 0.8);
}

TEST(Ssim, MatchesDirectFormulaReference) {
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
        Image a = random_image(32, 32, rng);
        Image b = random_image(32, 32, rng);
        EXPECT_NEAR(ssim(a, b, 1.0), reference::ssim_direct(a, b, 1.0), 1e-6);
    }
}

TEST(Ssim, SymmetricInArguments) {
    Rng rng(9);
    Image a = random_image(20, 20, rng);
    Image b = random_image(20, 20, rng);
    EXPECT_NEAR(ssim(a, b, 1.0), ssim(b, a, 1.0), 1e-9);
}

TEST(Ssim, WindowLargerThanImageThrows) {
    Image a = Image::zeros(1, 8, 8);
    EXPECT_THROW(ssim(a, a, 1.0), DataError);
}

TEST(Ssim, ShapeMismatchThrows) {
    Image a = Image::zeros(1, 16, 16);
    Image b = Image::zeros(1, 16, 17);
    EXPECT_THROW(ssim(a, b, 1.0), ShapeError);
}

TEST(Pearson, SelfAndAnticorrelation) {
    Rng rng(11);
    Image a = random_image(16, 16, rng);
    EXPECT_NEAR(pearson_r(a, a), 1.0, 1e-12);
    Image b = a;
    for (float& v : b.pix) v = -v + 0.5f;
    EXPECT_NEAR(pearson_r(a, b), -1.0, 1e-9);
}

TEST(Pearson, ConstantInputReturnsZero) {
    Rng rng(13);
    Image a = random_image(16, 16, rng);
    Image c = Image::zeros(1, 16, 16);
    for (float& v : c.pix) v = 0.37f;
    EXPECT_EQ(pearson_r(a, c), 0.0);
    EXPECT_EQ(pearson_r(c, a), 0.0);
}

TEST(Pearson, ShiftAndPositiveScaleInvariant) {
    // Pixels on a 1/256 grid so the affine map is exact in float storage.
    Rng rng(15);
    Image a = Image::zeros(1, 16, 16);
    Image b = Image::zeros(1, 16, 16);
    for (float& v : a.pix) v = static_cast<float>(rng.uniform_int(256)) / 256.0f;
    for (float& v : b.pix) v = static_cast<float>(rng.uniform_int(256)) / 256.0f;
    Image b2 = b;
    for (float& v : b2.pix) v = 2.0f * v + 0.5f;
    EXPECT_NEAR(pearson_r(a, b), pearson_r(a, b2), 1e-9);
}

TEST(Pearson, MatchesDirectFormula) {
    Rng rng(17);
    for (int i = 0; i < 50; ++i) {
        Image a = random_image(32, 32, rng);
        Image b = random_image(32, 32, rng);
        EXPECT_NEAR(pearson_r(a, b), reference::pearson_direct(a, b), 1e-6);
    }
}

TEST(Pearson, TooFewPixelsThrows) {
    Image a = Image::zeros(1, 1, 1);
    EXPECT_THROW(pearson_r(a, a), DataError);
}

TEST(Psnr, HandEvaluatedTwentyDecibels) {
    Image a = Image::zeros(1, 10, 10);
    Image b = a;
    for (float& v : b.pix) v = 0.1f;  // MSE 0.01 at range 1
    EXPECT_NEAR(psnr(a, b, 1.0), 20.0, 1e-5);
}

TEST(Psnr, IdenticalImagesHitInfinitySentinel) {
    Rng rng(19);
    Image a = random_image(12, 12, rng);
    EXPECT_TRUE(std::isinf(psnr(a, a, 1.0)));
}

TEST(Psnr, NearZeroMseInflatesAboveSixtyDecibels) {
    Image a = Image::zeros(1, 32, 32);
    Image b = a;
    b.pix[0] = 2e-4f;  // nearly-empty pair of patches
    EXPECT_GT(psnr(a, b, 1.0), 60.0);
}

TEST(Psnr, MatchesDirectFormula) {
    Rng rng(21);
    for (int i = 0; i < 50; ++i) {
        Image a = random_image(32, 32, rng);
        Image b = random_image(32, 32, rng);
        EXPECT_NEAR(psnr(a, b, 1.0), reference::psnr_direct(a, b, 1.0), 1e-6);
    }
}

MarkerPanel panel2() { return MarkerPanel{{"DAPI", "CD3"}}; }

TEST(Evaluate, PerfectPredictionsAndConsistency) {
    Rng rng(23);
    std::map<std::string, std::map<std::string, Image>> gt, pred;
    for (int i = 0; i < 4; ++i) {
        std::string id = "p" + std::to_string(i);
        gt[id]["DAPI"] = random_image(24, 24, rng);
        gt[id]["CD3"] = random_image(24, 24, rng);
        pred[id] = gt[id];
    }
    auto report = evaluate(panel2(), pred, gt, 0.8, 1.0);
    EXPECT_EQ(report.per_marker.at("DAPI").count, 4);
    EXPECT_DOUBLE_EQ(report.per_marker.at("DAPI").ssim, 1.0);
    EXPECT_NEAR(report.per_marker.at("CD3").pearson, 1.0, 1e-9);
    EXPECT_TRUE(std::isinf(report.per_marker.at("DAPI").psnr));
    // Averages recomputed from per-marker values match the emitted averages.
    double expect = (report.per_marker.at("DAPI").ssim + report.per_marker.at("CD3").ssim) / 2;
    EXPECT_NEAR(report.avg_ssim, expect, 1e-9);
}

TEST(Evaluate, EmptyPatchesExcludedPerMarker) {
    Rng rng(29);
    std::map<std::string, std::map<std::string, Image>> gt, pred;
    gt["a"]["DAPI"] = random_image(24, 24, rng);
    gt["a"]["CD3"] = Image::zeros(1, 24, 24);  // empty -> excluded
    pred["a"]["DAPI"] = gt["a"]["DAPI"];
    pred["a"]["CD3"] = gt["a"]["CD3"];
    auto report = evaluate(panel2(), pred, gt, 0.8, 1.0);
    EXPECT_EQ(report.per_marker.at("DAPI").count, 1);
    EXPECT_EQ(report.per_marker.at("CD3").count, 0);
    EXPECT_EQ(report.per_marker.at("CD3").excluded, 1);
    // Only DAPI enters the averages.
    EXPECT_DOUBLE_EQ(report.avg_ssim, report.per_marker.at("DAPI").ssim);
}

TEST(Evaluate, PredictionForUnknownMarkerThrows) {
    Rng rng(31);
    std::map<std::string, std::map<std::string, Image>> gt, pred;
    gt["a"]["DAPI"] = random_image(24, 24, rng);
    pred["a"]["DAPI"] = gt["a"]["DAPI"];
    pred["a"]["CD3"] = random_image(24, 24, rng);  // absent from GT
    EXPECT_THROW(evaluate(panel2(), pred, gt, 0.8, 1.0), DataError);
}

TEST(Evaluate, ReportSerializationRoundtrips) {
    Rng rng(37);
    std::map<std::string, std::map<std::string, Image>> gt, pred;
    gt["a"]["DAPI"] = random_image(24, 24, rng);
    gt["a"]["CD3"] = random_image(24, 24, rng);
    pred["a"]["DAPI"] = random_image(24, 24, rng);
    pred["a"]["CD3"] = random_image(24, 24, rng);
    auto report = evaluate(panel2(), pred, gt, 0.8, 1.0);
    auto j = report_json(report);
    EXPECT_EQ(j["per_marker"]["DAPI"]["count"], 1);
    EXPECT_NEAR(j["avg"]["ssim"].get<double>(), report.avg_ssim, 1e-12);
    std::string table = report_table(report);
    EXPECT_NE(table.find("SSIM"), std::string::npos);
    EXPECT_NE(table.find("DAPI"), std::string::npos);
}

}  // namespace
