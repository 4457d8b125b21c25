#include <gtest/gtest.h>

#include "lsms/errors.hpp"
#include "lsms/vision_encoder.hpp"
#include "support.hpp"

using namespace lsms;

namespace {

TextFeatures random_text(int batch, int channels, int tokens, int valid, torch::Dtype dtype = torch::kFloat) {
    TextFeatures t;
    t.features = torch::randn({batch, channels, tokens}, torch::TensorOptions().dtype(dtype));
    t.mask = torch::zeros({batch, tokens}, torch::kBool);
    t.mask.slice(1, 0, valid).fill_(true);
    return t;
}

ErrorCode code_of(const std::function<void()> &f) {
    try {
        f();
    } catch (const Error &e) {
        return e.code();
    }
    ADD_FAILURE() << "no lsms::Error thrown";
    return ErrorCode::UsageError;
}

void zero_conv(torch::nn::Conv2d &conv) {
    torch::NoGradGuard g;
    conv->weight.zero_();
    if (conv->bias.defined()) conv->bias.zero_();
}

}  // namespace

TEST(VisionEncoder, FullSizeStageGeometry) {
    torch::manual_seed(0);
    auto cfg = ModelConfig::full();
    VisionEncoder enc(cfg);
    // Batch statistics: untrained running statistics let activations grow
    // without bound through the post-norm residual stack.
    enc->train();
    torch::NoGradGuard g;
    const auto out = enc(torch::rand({1, 3, 480, 480}), random_text(1, 768, 24, 9));
    const std::array<std::array<int64_t, 3>, 4> expected{{{64, 120, 120}, {128, 60, 60}, {320, 30, 30}, {512, 15, 15}}};
    for (int s = 0; s < 4; ++s) {
        EXPECT_EQ(out.maps[s].sizes(), torch::IntArrayRef({1, expected[s][0], expected[s][1], expected[s][2]}))
            << "stage " << s + 1;
        EXPECT_TRUE(torch::isfinite(out.maps[s]).all().item<bool>());
    }
}

TEST(VisionEncoder, ToyGeometryFollowsConfig) {
    torch::manual_seed(0);
    auto cfg = ModelConfig::toy();
    VisionEncoder enc(cfg);
    const auto out = enc(torch::rand({2, 3, 96, 96}), random_text(2, 64, 32, 5));
    for (int s = 0; s < 4; ++s) {
        EXPECT_EQ(out.maps[s].sizes(),
                  torch::IntArrayRef({2, cfg.stage_channels[s], cfg.stage_height(s), cfg.stage_width(s)}));
    }
}

TEST(VisionEncoder, EmbeddingReducesByFour) {
    VisionEncoder enc(ModelConfig::toy());
    EXPECT_EQ(enc->embed(torch::rand({1, 3, 64, 128})).sizes(), torch::IntArrayRef({1, 16, 16, 32}));
}

TEST(VisionEncoder, RejectsBadImageShapes) {
    VisionEncoder enc(ModelConfig::toy());
    const auto text = random_text(1, 64, 32, 4);
    EXPECT_EQ(code_of([&] { enc(torch::rand({1, 3, 100, 96}), text); }), ErrorCode::BadImageShape);
    EXPECT_EQ(code_of([&] { enc(torch::rand({1, 4, 96, 96}), text); }), ErrorCode::BadImageShape);
    EXPECT_EQ(code_of([&] { enc(torch::rand({3, 96, 96}), text); }), ErrorCode::BadImageShape);
    EXPECT_EQ(code_of([&] { check_image_shape(torch::rand({1, 3, 0, 32})); }), ErrorCode::BadImageShape);
}

TEST(Downsample, HalvesResolutionAndChecksInput) {
    Downsample down(16, 32);
    EXPECT_EQ(down(torch::rand({2, 16, 24, 24})).sizes(), torch::IntArrayRef({2, 32, 12, 12}));
    EXPECT_EQ(code_of([&] { down(torch::rand({2, 8, 24, 24})); }), ErrorCode::ShapeMismatch);
    EXPECT_EQ(code_of([&] { down(torch::rand({2, 16, 23, 24})); }), ErrorCode::ShapeMismatch);
}

TEST(VisionEncoder, RejectsNonIncreasingWidths) {
    auto cfg = ModelConfig::toy();
    cfg.stage_channels = {16, 16, 64, 96};
    EXPECT_EQ(code_of([&] { VisionEncoder enc(cfg); }), ErrorCode::InvalidConfig);
}

TEST(EncoderBlock, ZeroFeedForwardLeavesTheAttentionPath) {
    torch::manual_seed(3);
    SvlaConfig s;
    s.channels = 8;
    s.text_channels = 12;
    EncoderBlock block(s, 4, NormKind::Batch);
    zero_conv(block->ffn()->project());
    block->eval();
    torch::NoGradGuard g;
    const auto v = torch::randn({2, 8, 12, 12});
    const auto text = random_text(2, 12, 6, 4);
    const auto expected = block->norm2()(block->norm1()(block->svla()(v, text) + v));
    EXPECT_TRUE(torch::allclose(block(v, text), expected, 1e-6, 1e-6));
}

TEST(EncoderBlock, ZeroGateLeavesTheResidualPath) {
    torch::manual_seed(4);
    SvlaConfig s;
    s.channels = 8;
    s.text_channels = 12;
    EncoderBlock block(s, 4, NormKind::Batch);
    zero_conv(block->svla()->gate_conv());
    block->eval();
    torch::NoGradGuard g;
    const auto v = torch::randn({2, 8, 12, 12});
    const auto f = block->norm1()(v);
    const auto expected = block->norm2()(block->ffn()(f) + f);
    EXPECT_TRUE(torch::allclose(block(v, random_text(2, 12, 6, 4)), expected, 1e-6, 1e-6));
    EXPECT_TRUE(torch::allclose(block(v, random_text(2, 12, 6, 2)), expected, 1e-6, 1e-6));
}

TEST(EncoderBlock, LayerNormNormalisesAcrossChannels) {
    torch::manual_seed(5);
    SvlaConfig s;
    s.channels = 8;
    s.text_channels = 12;
    EncoderBlock block(s, 4, NormKind::Layer);
    torch::NoGradGuard g;
    const auto out = block(torch::randn({1, 8, 6, 6}) * 5 + 2, random_text(1, 12, 5, 5));
    EXPECT_LT(out.mean(1).abs().max().item<double>(), 1e-5);
    EXPECT_NEAR(out.var(1, false).mean().item<double>(), 1.0, 1e-2);
}

TEST(EncoderBlock, GradientMatchesFiniteDifferences) {
    torch::manual_seed(6);
    SvlaConfig s;
    s.channels = 4;
    s.text_channels = 6;
    s.kernel_sizes = {3, 5};
    EncoderBlock block(s, 2, NormKind::Batch);
    block->to(torch::kDouble);
    block->train();
    auto v = torch::randn({2, 4, 6, 6}, torch::kDouble).requires_grad_(true);
    auto text = random_text(2, 6, 4, 3, torch::kDouble);
    text.features.requires_grad_(true);
    auto targets = test::named_params(*block);
    targets.emplace_back("input", v);
    targets.emplace_back("text", text.features);
    const auto r = test::grad_check([&] { return test::probe_loss(block(v, text)); }, targets);
    EXPECT_LT(r.max_rel_error, 1e-4) << "worst: " << r.worst;
    EXPECT_GT(r.checked, 400);
}

TEST(VisionEncoder, OutputDependsOnTextOnlyThroughLanguageBranch) {
    torch::manual_seed(7);
    auto cfg = ModelConfig::toy();
    const auto image = torch::rand({1, 3, 96, 96});
    const auto a = random_text(1, 64, 32, 6);
    const auto b = random_text(1, 64, 32, 6);
    {
        VisionEncoder enc(cfg);
        enc->eval();
        torch::NoGradGuard g;
        const auto diff = (enc(image, a).maps[3] - enc(image, b).maps[3]).abs().max().item<double>();
        EXPECT_GT(diff, 1e-3);
    }
    cfg.language_branch = false;
    VisionEncoder enc(cfg);
    enc->eval();
    torch::NoGradGuard g;
    for (int s = 0; s < 4; ++s) {
        EXPECT_TRUE(torch::equal(enc(image, a).maps[s], enc(image, b).maps[s]));
    }
}

TEST(VisionEncoder, BatchElementsAreIndependentInEvalMode) {
    torch::manual_seed(8);
    VisionEncoder enc(ModelConfig::toy());
    enc->to(torch::kDouble);
    enc->eval();
    torch::NoGradGuard g;
    const auto images = torch::rand({3, 3, 96, 96}, torch::kDouble);
    const auto text = random_text(3, 64, 32, 7, torch::kDouble);
    const auto joint = enc(images, text).maps[3];
    TextFeatures one{text.features.slice(0, 1, 2), text.mask.slice(0, 1, 2)};
    const auto alone = enc(images.slice(0, 1, 2), one).maps[3];
    EXPECT_TRUE(torch::allclose(joint.slice(0, 1, 2), alone, 1e-10, 1e-10));
}
