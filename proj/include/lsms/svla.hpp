#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "lsms/text_encoder.hpp"

namespace lsms {

struct SvlaConfig {
    // One ConvUnit per entry; all odd. Empty disables the visual knowledge branch.
    std::vector<int> kernel_sizes{7, 11, 21};
    int channels = 64;
    int text_channels = 768;
    // Elementwise "pixel map" product with the projected visual feature.
    bool pixel_map = true;
    bool language_branch = true;
    // Softmax divisor; <= 0 means sqrt(text_channels).
    double temperature = 0.0;

    double softmax_divisor() const;
    void validate() const;
};

// Cross-attention intermediates, kept for tests and visualisation.
//   v1: [B, C, P]; l1, l2: [B, C, T]; alpha, weights: [B, P, T]
struct CrossAttentionIntermediates {
    torch::Tensor v1;
    torch::Tensor l1;
    torch::Tensor l2;
    torch::Tensor alpha;
    torch::Tensor weights;
    torch::Tensor attended;  // Att^{L'} before the output projection, [B, C, H, W]
};

// Depthwise 1xd then dx1 strip convolution pair, zero padded so H x W is kept.
class ConvUnitImpl : public torch::nn::Module {
public:
    ConvUnitImpl(int channels, int kernel);

    torch::Tensor forward(const torch::Tensor &x);

    int kernel() const { return kernel_; }
    torch::nn::Conv2d &horizontal() { return horizontal_; }
    torch::nn::Conv2d &vertical() { return vertical_; }

private:
    int channels_;
    int kernel_;
    torch::nn::Conv2d horizontal_{nullptr};
    torch::nn::Conv2d vertical_{nullptr};
};
TORCH_MODULE(ConvUnit);

// 1x1 convolution followed by (non-affine) instance normalisation.
class ProjectionImpl : public torch::nn::Module {
public:
    explicit ProjectionImpl(int channels);
    torch::Tensor forward(const torch::Tensor &x);

    torch::nn::Conv2d &conv() { return conv_; }

private:
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::InstanceNorm2d norm_{nullptr};
};
TORCH_MODULE(Projection);

/// Scale-aware vision-language attention.
///
/// Given a visual map V [B, C, H, W] and text features L [B, C_l, T]:
///
///   V_pre  = DWConv5x5(V)
///   Att_V  = sum_j ConvUnit_j(V_pre)
///   Att_L  = proj_f(softmax(proj_v1(V_pre)^T proj_l1(L) / divisor) proj_l2(L)^T) * proj_v2(V_pre)
///   out    = Conv1x1(V_pre + Att_V + Att_L) * V
///
/// Masked tokens receive a -1e9 logit before the softmax.
class SvlaImpl : public torch::nn::Module {
public:
    explicit SvlaImpl(const SvlaConfig &cfg);

    torch::Tensor forward(const torch::Tensor &v, const TextFeatures &text);

    torch::Tensor preliminary(const torch::Tensor &v);
    torch::Tensor visual_knowledge(const torch::Tensor &v_pre);
    std::pair<torch::Tensor, CrossAttentionIntermediates> language_guided(const torch::Tensor &v_pre,
                                                                          const TextFeatures &text);

    const SvlaConfig &config() const { return cfg_; }

    torch::nn::Conv2d &pre_conv() { return pre_; }
    torch::nn::Conv2d &gate_conv() { return gate_; }
    std::vector<ConvUnit> &units() { return units_; }

private:
    void check_channels(const torch::Tensor &x) const;

    SvlaConfig cfg_;
    torch::nn::Conv2d pre_{nullptr};
    std::vector<ConvUnit> units_;
    Projection proj_v1_{nullptr}, proj_v2_{nullptr}, proj_f_{nullptr};
    torch::nn::Conv1d proj_l1_{nullptr}, proj_l2_{nullptr};
    torch::nn::Conv2d gate_{nullptr};
};
TORCH_MODULE(Svla);

// Softmax of logits [B, P, T] over T with masked columns set to -1e9 first.
torch::Tensor masked_token_softmax(const torch::Tensor &logits, const torch::Tensor &mask);

}  // namespace lsms
