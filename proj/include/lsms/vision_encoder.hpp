#pragma once

#include <array>

#include <torch/torch.h>

#include "lsms/config.hpp"
#include "lsms/svla.hpp"

namespace lsms {

// F_1..F_4, stage i at [B, C_i, H / 2^(i+2), W / 2^(i+2)].
struct StageFeatures {
    std::array<torch::Tensor, 4> maps;
};

// Channel normalisation over [B, C, H, W]: batch norm, or layer norm across
// channels at every pixel.
class ChannelNormImpl : public torch::nn::Module {
public:
    ChannelNormImpl(int channels, NormKind kind);
    torch::Tensor forward(const torch::Tensor &x);

    NormKind kind() const { return kind_; }
    torch::nn::BatchNorm2d &batch() { return batch_; }

private:
    NormKind kind_;
    torch::nn::BatchNorm2d batch_{nullptr};
    torch::nn::LayerNorm layer_{nullptr};
};
TORCH_MODULE(ChannelNorm);

// Two 3x3 stride-2 convolutions with BN, GELU between: [B,3,H,W] -> [B,C,H/4,W/4].
class EmbeddingBlockImpl : public torch::nn::Module {
public:
    explicit EmbeddingBlockImpl(int out_channels);
    torch::Tensor forward(const torch::Tensor &image);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(EmbeddingBlock);

// 3x3 stride-2 convolution followed by batch normalisation.
class DownsampleImpl : public torch::nn::Module {
public:
    DownsampleImpl(int in_channels, int out_channels);
    torch::Tensor forward(const torch::Tensor &x);

private:
    int in_channels_;
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(Downsample);

// 1x1 expand -> depthwise 3x3 -> GELU -> 1x1 project.
class FeedForwardImpl : public torch::nn::Module {
public:
    FeedForwardImpl(int channels, int expansion);
    torch::Tensor forward(const torch::Tensor &x);

    torch::nn::Conv2d &expand() { return expand_; }
    torch::nn::Conv2d &depthwise() { return depthwise_; }
    torch::nn::Conv2d &project() { return project_; }

private:
    torch::nn::Conv2d expand_{nullptr}, depthwise_{nullptr}, project_{nullptr};
};
TORCH_MODULE(FeedForward);

// F' = Norm(SVLA(V, L) + V);  F = Norm(FeedForward(F') + F')
class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(const SvlaConfig &svla, int ffn_expansion, NormKind norm);
    torch::Tensor forward(const torch::Tensor &v, const TextFeatures &text);

    Svla &svla() { return svla_; }
    FeedForward &ffn() { return ffn_; }
    ChannelNorm &norm1() { return norm1_; }
    ChannelNorm &norm2() { return norm2_; }

private:
    Svla svla_{nullptr};
    ChannelNorm norm1_{nullptr}, norm2_{nullptr};
    FeedForward ffn_{nullptr};
};
TORCH_MODULE(EncoderBlock);

class VisionEncoderImpl : public torch::nn::Module {
public:
    explicit VisionEncoderImpl(const ModelConfig &cfg);

    // image: [B, 3, H, W] in [0, 1]; H, W as configured.
    StageFeatures forward(const torch::Tensor &image, const TextFeatures &text);

    torch::Tensor embed(const torch::Tensor &image);
    EncoderBlock &block(int stage, int index);
    Downsample &downsample(int stage);  // stage 1..3 (0-based), i.e. before stages 2..4

private:
    ModelConfig cfg_;
    EmbeddingBlock embedding_{nullptr};
    std::array<Downsample, 3> downsample_{nullptr, nullptr, nullptr};
    std::array<std::vector<EncoderBlock>, 4> blocks_;
};
TORCH_MODULE(VisionEncoder);

// Throws BadImageShape unless image is [B, 3, H, W] with H, W divisible by 32.
void check_image_shape(const torch::Tensor &image);

}  // namespace lsms
