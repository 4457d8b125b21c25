#include "lsms/svla.hpp"

#include <cmath>
#include <string>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

constexpr double kMaskedLogit = -1e9;

void fan_in_init(torch::nn::Conv2d &conv) {
    torch::NoGradGuard guard;
    const auto &w = conv->weight;
    const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
    w.normal_(0.0, std::sqrt(2.0 / fan_in));
    if (conv->bias.defined()) conv->bias.zero_();
}

void fan_in_init(torch::nn::Conv1d &conv) {
    torch::NoGradGuard guard;
    const auto &w = conv->weight;
    const double fan_in = static_cast<double>(w.size(1) * w.size(2));
    w.normal_(0.0, std::sqrt(1.0 / fan_in));
    if (conv->bias.defined()) conv->bias.zero_();
}

}  // namespace

double SvlaConfig::softmax_divisor() const {
    return temperature > 0.0 ? temperature : std::sqrt(static_cast<double>(text_channels));
}

void SvlaConfig::validate() const {
    if (channels <= 0 || text_channels <= 0) {
        throw Error(ErrorCode::InvalidConfig, "SVLA channels must be positive");
    }
    for (int d : kernel_sizes) {
        if (d <= 0 || d % 2 == 0) {
            throw Error(ErrorCode::InvalidConfig, "ConvUnit kernel sizes must be odd and positive, got " + std::to_string(d));
        }
    }
}

ConvUnitImpl::ConvUnitImpl(int channels, int kernel) : channels_(channels), kernel_(kernel) {
    if (kernel <= 0 || kernel % 2 == 0) {
        throw Error(ErrorCode::InvalidConfig, "ConvUnit kernel must be odd");
    }
    const int pad = kernel / 2;
    horizontal_ = register_module(
        "horizontal",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, {1, kernel}).padding({0, pad}).groups(channels)));
    vertical_ = register_module(
        "vertical",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, {kernel, 1}).padding({pad, 0}).groups(channels)));
    fan_in_init(horizontal_);
    fan_in_init(vertical_);
}

torch::Tensor ConvUnitImpl::forward(const torch::Tensor &x) {
    if (x.dim() != 4 || x.size(1) != channels_) {
        throw Error(ErrorCode::ShapeMismatch, "ConvUnit expects " + std::to_string(channels_) + " channels");
    }
    return vertical_(horizontal_(x));
}

ProjectionImpl::ProjectionImpl(int channels) {
    conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    norm_ = register_module("norm", torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(channels)));
    fan_in_init(conv_);
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor &x) { return norm_(conv_(x)); }

torch::Tensor masked_token_softmax(const torch::Tensor &logits, const torch::Tensor &mask) {
    auto masked = logits.masked_fill(mask.logical_not().unsqueeze(1), kMaskedLogit);
    return torch::softmax(masked, -1);
}

SvlaImpl::SvlaImpl(const SvlaConfig &cfg) : cfg_(cfg) {
    cfg_.validate();
    const int c = cfg.channels;
    pre_ = register_module("pre", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 5).padding(2).groups(c)));
    fan_in_init(pre_);
    for (std::size_t j = 0; j < cfg.kernel_sizes.size(); ++j) {
        units_.push_back(register_module("unit" + std::to_string(j), ConvUnit(c, cfg.kernel_sizes[j])));
    }
    if (cfg.language_branch) {
        proj_v1_ = register_module("proj_v1", Projection(c));
        proj_v2_ = register_module("proj_v2", Projection(c));
        proj_f_ = register_module("proj_f", Projection(c));
        proj_l1_ = register_module("proj_l1", torch::nn::Conv1d(torch::nn::Conv1dOptions(cfg.text_channels, c, 1)));
        proj_l2_ = register_module("proj_l2", torch::nn::Conv1d(torch::nn::Conv1dOptions(cfg.text_channels, c, 1)));
        fan_in_init(proj_l1_);
        fan_in_init(proj_l2_);
    }
    gate_ = register_module("gate", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
    fan_in_init(gate_);
}

void SvlaImpl::check_channels(const torch::Tensor &x) const {
    if (x.dim() != 4 || x.size(1) != cfg_.channels) {
        throw Error(ErrorCode::ShapeMismatch,
                    "SVLA expects [B, " + std::to_string(cfg_.channels) + ", H, W] visual input");
    }
}

torch::Tensor SvlaImpl::preliminary(const torch::Tensor &v) {
    check_channels(v);
    return pre_(v);
}

torch::Tensor SvlaImpl::visual_knowledge(const torch::Tensor &v_pre) {
    check_channels(v_pre);
    torch::Tensor sum;
    for (auto &unit : units_) {
        auto out = unit(v_pre);
        sum = sum.defined() ? sum + out : out;
    }
    return sum.defined() ? sum : torch::zeros_like(v_pre);
}

std::pair<torch::Tensor, CrossAttentionIntermediates> SvlaImpl::language_guided(const torch::Tensor &v_pre,
                                                                                const TextFeatures &text) {
    check_channels(v_pre);
    if (!cfg_.language_branch) {
        return {torch::zeros_like(v_pre), {}};
    }
    if (text.features.dim() != 3 || text.features.size(1) != cfg_.text_channels) {
        throw Error(ErrorCode::ShapeMismatch,
                    "SVLA expects text features with " + std::to_string(cfg_.text_channels) + " channels");
    }
    if (text.features.size(0) != v_pre.size(0) || text.mask.sizes() != torch::IntArrayRef({v_pre.size(0), text.tokens()})) {
        throw Error(ErrorCode::ShapeMismatch, "text batch does not match the visual batch");
    }
    if (!text.mask.any(1).all().item<bool>()) {
        throw Error(ErrorCode::AllTokensMasked, "every token of an expression is masked");
    }

    const auto batch = v_pre.size(0);
    const auto channels = v_pre.size(1);
    const auto height = v_pre.size(2);
    const auto width = v_pre.size(3);

    CrossAttentionIntermediates mid;
    mid.v1 = proj_v1_(v_pre).flatten(2);  // [B, C, P]
    auto v2 = proj_v2_(v_pre);
    mid.l1 = proj_l1_(text.features);  // [B, C, T]
    mid.l2 = proj_l2_(text.features);
    // Written as (L1^T V1)^T so the gradient reaching the instance norm is
    // NCHW-contiguous; batch_norm backward mishandles the transposed layout
    // at batch size 1.
    mid.alpha = torch::bmm(mid.l1.transpose(1, 2), mid.v1).transpose(1, 2);  // [B, P, T]
    mid.weights = masked_token_softmax(mid.alpha / cfg_.softmax_divisor(), text.mask);
    mid.attended = torch::bmm(mid.l2, mid.weights.transpose(1, 2)).reshape({batch, channels, height, width});

    auto att = proj_f_(mid.attended);
    if (cfg_.pixel_map) att = att * v2;
    return {att, mid};
}

torch::Tensor SvlaImpl::forward(const torch::Tensor &v, const TextFeatures &text) {
    auto v_pre = preliminary(v);
    auto combined = v_pre + visual_knowledge(v_pre);
    if (cfg_.language_branch) combined = combined + language_guided(v_pre, text).first;
    return gate_(combined) * v;
}

}  // namespace lsms
