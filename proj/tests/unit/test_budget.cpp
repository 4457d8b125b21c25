#include <gtest/gtest.h>

#include "lsms/budget.hpp"
#include "lsms/model.hpp"

using namespace lsms;

namespace {

std::int64_t numel_of(torch::nn::Module &m) {
    std::int64_t n = 0;
    for (const auto &p : m.parameters()) n += p.numel();
    return n;
}

// Spatial positions produced by the module `name` of an LsmsModel.
std::int64_t output_pixels(const std::string &name, const ModelConfig &cfg) {
    auto stage_pixels = [&](int s) { return static_cast<std::int64_t>(cfg.stage_height(s)) * cfg.stage_width(s); };
    if (name.find("embedding.conv1") != std::string::npos) {
        return static_cast<std::int64_t>(cfg.image_height / 2) * (cfg.image_width / 2);
    }
    if (name.find("embedding.conv2") != std::string::npos) return stage_pixels(0);
    for (int s = 1; s <= 4; ++s) {
        if (name.find("encoder.down" + std::to_string(s)) == 0) return stage_pixels(s - 1);
        if (name.find("encoder.stage" + std::to_string(s) + "_") == 0) return stage_pixels(s - 1);
    }
    if (name.find("decoder.") == 0) return stage_pixels(0);
    ADD_FAILURE() << "unplaced module " << name;
    return 0;
}

// Multiply-accumulates recounted from the instantiated modules: every conv
// contributes weight.numel() per output position, plus the attention and NMF
// matrix products written out independently.
std::int64_t module_macs(LsmsModel &model) {
    const auto &cfg = model->config();
    std::int64_t macs = 0;
    for (const auto &item : model->named_modules()) {
        const auto &name = item.key();
        if (name.rfind("text", 0) == 0) continue;
        if (auto conv = item.value()->as<torch::nn::Conv2d>()) {
            macs += conv->weight.numel() * output_pixels(name, cfg);
        } else if (auto conv1d = item.value()->as<torch::nn::Conv1d>()) {
            macs += conv1d->weight.numel() * cfg.max_tokens;
        }
    }
    for (int s = 0; s < 4; ++s) {
        if (!cfg.language_branch) break;
        const std::int64_t p = static_cast<std::int64_t>(cfg.stage_height(s)) * cfg.stage_width(s);
        macs += cfg.stage_blocks[s] * 2 * p * cfg.max_tokens * cfg.stage_channels[s];
    }
    const auto &d = cfg.decoder;
    if (d.variant == DecoderVariant::ConcatHead || d.variant == DecoderVariant::MlpConcatHead) {
        const std::int64_t c = d.squeeze_channels, r = d.nmf_rank;
        const std::int64_t p = static_cast<std::int64_t>(cfg.stage_height(0)) * cfg.stage_width(0);
        const std::int64_t init = c * p * r;
        const std::int64_t coef = c * p * r + c * r * r + p * r * r;   // x^T D, D^T D, Z (D^T D)
        const std::int64_t bases = c * p * r + p * r * r + c * r * r;  // x Z, Z^T Z, D (Z^T Z)
        const std::int64_t recon = c * p * r;
        macs += init + d.nmf_iters * (coef + bases) + coef + recon;
    }
    return macs;
}

std::vector<ModelConfig> variants() {
    std::vector<ModelConfig> out;
    auto toy = ModelConfig::toy();
    out.push_back(toy);
    auto c = toy;
    c.kernel_sizes = {7};
    c.pixel_map = false;
    out.push_back(c);
    c = toy;
    c.language_branch = false;
    c.norm = NormKind::Layer;
    out.push_back(c);
    for (auto v : {DecoderVariant::MlpConcat, DecoderVariant::MlpConcatHead, DecoderVariant::NoFsd}) {
        c = toy;
        c.decoder.variant = v;
        c.decoder.use_stages = {1, 2, 3, 4};
        out.push_back(c);
    }
    c = toy;
    c.ffn_expansion = 2;
    c.image_height = 64;
    c.image_width = 128;
    c.decoder.use_stages = {4};
    out.push_back(c);
    return out;
}

}  // namespace

TEST(Budget, ParamCountEqualsInstantiatedModel) {
    for (const auto &cfg : variants()) {
        LsmsModel model(cfg);
        const auto without_text = count_params_flops(cfg, false);
        const auto with_text = count_params_flops(cfg, true);
        const auto text_params = numel_of(*model->toy_text());
        EXPECT_EQ(without_text.params(), numel_of(*model) - text_params) << cfg.hash();
        EXPECT_EQ(with_text.params(), numel_of(*model)) << cfg.hash();
    }
}

TEST(Budget, FullSizeParamCountEqualsInstantiatedModel) {
    auto cfg = ModelConfig::full();
    LsmsModel model(cfg);
    EXPECT_EQ(count_params_flops(cfg, false).params(), numel_of(*model));
}

TEST(Budget, MacCountEqualsModuleRecount) {
    for (const auto &cfg : variants()) {
        LsmsModel model(cfg);
        EXPECT_EQ(count_params_flops(cfg, false).macs(), module_macs(model)) << cfg.hash();
    }
    auto full = ModelConfig::full();
    LsmsModel model(full);
    EXPECT_EQ(count_params_flops(full, false).macs(), module_macs(model));
}

TEST(Budget, FlopsAreTwiceMacs) {
    const auto r = count_params_flops(ModelConfig::toy(), false);
    EXPECT_EQ(r.flops(), 2 * r.macs());
}

TEST(Budget, ToyModelStaysUnderOneMillionParams) {
    EXPECT_LT(count_params_flops(ModelConfig::toy(), true).params(), 1'000'000);
}

TEST(Budget, BertBaseTextEntryMatchesKnownSize) {
    auto cfg = ModelConfig::full();
    const auto with_text = count_params_flops(cfg, true);
    const auto without_text = count_params_flops(cfg, false);
    EXPECT_EQ(with_text.params() - without_text.params(), 109'482'240);
}

TEST(Budget, TablePrintsReferenceTargets) {
    const auto table = count_params_flops(ModelConfig::full(), false).table();
    EXPECT_NE(table.find("reference 8.78 M"), std::string::npos);
    EXPECT_NE(table.find("reference 8.91 G"), std::string::npos);
    EXPECT_NE(table.find("decoder"), std::string::npos);
}
