#include "lsms/vision_encoder.hpp"

#include <string>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

torch::nn::Conv2dOptions conv_options(int in, int out, int kernel, int stride, int padding, int groups = 1) {
    return torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).groups(groups);
}

std::string shape_of(const torch::Tensor &t) {
    std::string s = "[";
    for (int64_t i = 0; i < t.dim(); ++i) s += (i ? ", " : "") + std::to_string(t.size(i));
    return s + "]";
}

}  // namespace

void check_image_shape(const torch::Tensor &image) {
    if (image.dim() != 4 || image.size(1) != 3 || image.size(2) % 32 != 0 || image.size(3) % 32 != 0 ||
        image.size(2) == 0 || image.size(3) == 0) {
        throw Error(ErrorCode::BadImageShape,
                    "expected [B, 3, H, W] with H and W divisible by 32, got " + shape_of(image));
    }
}

ChannelNormImpl::ChannelNormImpl(int channels, NormKind kind) : kind_(kind) {
    if (kind == NormKind::Batch) {
        batch_ = register_module("bn", torch::nn::BatchNorm2d(channels));
    } else {
        layer_ = register_module("ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    }
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor &x) {
    if (kind_ == NormKind::Batch) return batch_(x);
    return layer_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

EmbeddingBlockImpl::EmbeddingBlockImpl(int out_channels) {
    const int mid = std::max(1, out_channels / 2);
    conv1_ = register_module("conv1", torch::nn::Conv2d(conv_options(3, mid, 3, 2, 1)));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(mid));
    conv2_ = register_module("conv2", torch::nn::Conv2d(conv_options(mid, out_channels, 3, 2, 1)));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor EmbeddingBlockImpl::forward(const torch::Tensor &image) {
    return bn2_(conv2_(torch::gelu(bn1_(conv1_(image)))));
}

DownsampleImpl::DownsampleImpl(int in_channels, int out_channels) : in_channels_(in_channels) {
    conv_ = register_module("conv", torch::nn::Conv2d(conv_options(in_channels, out_channels, 3, 2, 1)));
    bn_ = register_module("bn", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor &x) {
    if (x.dim() != 4 || x.size(1) != in_channels_ || x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
        throw Error(ErrorCode::ShapeMismatch, "downsample expects " + std::to_string(in_channels_) +
                                                  " channels and even spatial size, got " + shape_of(x));
    }
    return bn_(conv_(x));
}

FeedForwardImpl::FeedForwardImpl(int channels, int expansion) {
    const int hidden = channels * expansion;
    expand_ = register_module("expand", torch::nn::Conv2d(conv_options(channels, hidden, 1, 1, 0)));
    depthwise_ = register_module("depthwise", torch::nn::Conv2d(conv_options(hidden, hidden, 3, 1, 1, hidden)));
    project_ = register_module("project", torch::nn::Conv2d(conv_options(hidden, channels, 1, 1, 0)));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor &x) {
    return project_(torch::gelu(depthwise_(expand_(x))));
}

EncoderBlockImpl::EncoderBlockImpl(const SvlaConfig &svla, int ffn_expansion, NormKind norm) {
    svla_ = register_module("svla", Svla(svla));
    norm1_ = register_module("norm1", ChannelNorm(svla.channels, norm));
    ffn_ = register_module("ffn", FeedForward(svla.channels, ffn_expansion));
    norm2_ = register_module("norm2", ChannelNorm(svla.channels, norm));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor &v, const TextFeatures &text) {
    auto f = norm1_(svla_(v, text) + v);
    return norm2_(ffn_(f) + f);
}

VisionEncoderImpl::VisionEncoderImpl(const ModelConfig &cfg) : cfg_(cfg) {
    cfg_.validate();
    embedding_ = register_module("embedding", EmbeddingBlock(cfg.stage_channels[0]));
    for (int s = 0; s < 4; ++s) {
        if (s > 0) {
            downsample_[s - 1] = register_module("down" + std::to_string(s + 1),
                                                 Downsample(cfg.stage_channels[s - 1], cfg.stage_channels[s]));
        }
        for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
            blocks_[s].push_back(register_module("stage" + std::to_string(s + 1) + "_block" + std::to_string(b),
                                                 EncoderBlock(cfg.svla(s), cfg.ffn_expansion, cfg.norm)));
        }
    }
}

torch::Tensor VisionEncoderImpl::embed(const torch::Tensor &image) {
    check_image_shape(image);
    return embedding_(image);
}

EncoderBlock &VisionEncoderImpl::block(int stage, int index) { return blocks_.at(stage).at(index); }

Downsample &VisionEncoderImpl::downsample(int stage) { return downsample_.at(stage - 1); }

StageFeatures VisionEncoderImpl::forward(const torch::Tensor &image, const TextFeatures &text) {
    StageFeatures out;
    auto x = embed(image);
    for (int s = 0; s < 4; ++s) {
        if (s > 0) x = downsample_[s - 1](x);
        for (auto &block : blocks_[s]) x = block(x, text);
        out.maps[s] = x;
    }
    return out;
}

}  // namespace lsms
