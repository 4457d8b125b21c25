#include <gtest/gtest.h>

#include <random>

#include "lsms/errors.hpp"
#include "lsms/metrics.hpp"

using namespace lsms;

namespace {

struct Brute {
    double dice;
    double iou;
};

// Pixel-by-pixel counting with plain loops.
Brute brute_force(const std::vector<std::uint8_t> &p, const std::vector<std::uint8_t> &g) {
    long inter = 0, np = 0, ng = 0, uni = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        np += p[i];
        ng += g[i];
        inter += p[i] && g[i];
        uni += p[i] || g[i];
    }
    Brute b;
    b.dice = np + ng == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + ng);
    b.iou = uni == 0 ? 1.0 : inter / static_cast<double>(uni);
    return b;
}

torch::Tensor to_tensor(const std::vector<std::uint8_t> &v, int h, int w) {
    return torch::from_blob(const_cast<std::uint8_t *>(v.data()), {h, w}, torch::kUInt8).clone();
}

std::vector<std::uint8_t> random_mask(std::mt19937 &rng, int n, double density) {
    std::bernoulli_distribution bit(density);
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
    for (auto &x : m) x = bit(rng);
    return m;
}

}  // namespace

TEST(Metrics, MatchBruteForceCountingOnRandomPairs) {
    std::mt19937 rng(123);
    std::uniform_int_distribution<int> side(1, 40);
    std::uniform_real_distribution<double> density(0.0, 1.0);
    std::vector<std::pair<torch::Tensor, torch::Tensor>> pairs;
    double iou_sum = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int h = side(rng), w = side(rng);
        // Every tenth pair is empty on at least one side.
        const auto p = random_mask(rng, h * w, trial % 10 == 0 ? 0.0 : density(rng));
        const auto g = random_mask(rng, h * w, trial % 20 == 0 ? 0.0 : density(rng));
        const auto want = brute_force(p, g);
        const auto pt = to_tensor(p, h, w), gt = to_tensor(g, h, w);
        EXPECT_EQ(dice(pt, gt), want.dice) << "trial " << trial;
        EXPECT_EQ(iou(pt, gt), want.iou) << "trial " << trial;
        pairs.emplace_back(pt, gt);
        iou_sum += want.iou;
    }
    EXPECT_NEAR(miou(pairs), iou_sum / 100.0, 1e-15);
}

TEST(Metrics, AreSymmetric) {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = to_tensor(random_mask(rng, 64, 0.3), 8, 8);
        const auto g = to_tensor(random_mask(rng, 64, 0.6), 8, 8);
        EXPECT_EQ(dice(p, g), dice(g, p));
        EXPECT_EQ(iou(p, g), iou(g, p));
    }
}

TEST(Metrics, WorkedExamples) {
    // P covers 4 pixels, G covers 6, they share 3: Dice 6/10, IoU 3/7.
    auto p = torch::zeros({4, 4}, torch::kBool);
    auto g = torch::zeros({4, 4}, torch::kBool);
    p.index_put_({0, torch::indexing::Slice(0, 4)}, true);
    g.index_put_({0, torch::indexing::Slice(1, 4)}, true);
    g.index_put_({1, torch::indexing::Slice(0, 3)}, true);
    const auto c = count_overlap(p, g);
    EXPECT_EQ(c.pred, 4);
    EXPECT_EQ(c.gt, 6);
    EXPECT_EQ(c.intersection, 3);
    EXPECT_EQ(c.union_size(), 7);
    EXPECT_DOUBLE_EQ(dice(p, g), 0.6);
    EXPECT_DOUBLE_EQ(iou(p, g), 3.0 / 7.0);
    EXPECT_EQ(dice(p, p), 1.0);
    EXPECT_EQ(dice(p, torch::zeros_like(p)), 0.0);
}

TEST(Metrics, BothEmptyScoresOneByDefault) {
    const auto z = torch::zeros({5, 5}, torch::kBool);
    EXPECT_EQ(dice(z, z), 1.0);
    EXPECT_EQ(iou(z, z), 1.0);
    EXPECT_EQ(dice(z, z, 0.0), 0.0);
    EXPECT_EQ(iou(z, z, 0.0), 0.0);
}

TEST(Metrics, AcceptNonBooleanMasks) {
    const auto p = torch::tensor({0.0, 1.0, 1.0, 0.0});
    const auto g = torch::tensor({0, 1, 0, 0}, torch::kLong);
    EXPECT_DOUBLE_EQ(dice(p, g), 2.0 / 3.0);
}

TEST(Metrics, ShapeMismatchAndEmptyLists) {
    try {
        dice(torch::zeros({3, 3}), torch::zeros({3, 4}));
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
    try {
        miou({});
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyEvaluation);
    }
    MetricsReport r;
    try {
        r.finalize();
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyEvaluation);
    }
}

TEST(MetricsReport, FinalizeAveragesAndRoundTripsJson) {
    MetricsReport r;
    r.per_sample = {{"a", 1.0, 1.0}, {"b", 0.5, 0.25}, {"c", 0.0, 0.0}};
    r.split = "val";
    r.text_fraction = 0.5;
    r.subset = "disambiguation";
    r.finalize();
    EXPECT_DOUBLE_EQ(r.dice_mean, 0.5);
    EXPECT_DOUBLE_EQ(r.miou_mean, 1.25 / 3.0);
    const auto back = nlohmann::json(r).get<MetricsReport>();
    EXPECT_EQ(back.per_sample.size(), 3u);
    EXPECT_EQ(back.subset, "disambiguation");
    EXPECT_DOUBLE_EQ(back.dice_mean, r.dice_mean);
    EXPECT_NE(r.table().find("Dice 0.5000"), std::string::npos);
}
