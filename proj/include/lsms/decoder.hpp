#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "lsms/config.hpp"
#include "lsms/vision_encoder.hpp"

namespace lsms {

// S_1..S_4: every stage map bilinearly resized to F_1's spatial size.
struct AlignedFeatures {
    std::array<torch::Tensor, 4> maps;
};

// Bilinear (align_corners = false). Returns the input itself when the size
// already matches.
torch::Tensor bilinear_resize(const torch::Tensor &x, int64_t height, int64_t width);

AlignedFeatures position_align(const StageFeatures &stages);

// Inner NMF state after the no-grad iterations. Tensors are detached.
struct NmfState {
    torch::Tensor bases;  // [B, C, R]
    torch::Tensor coef;   // [B, P, R]
};

struct NmfOptions {
    int rank = 64;
    int iters = 6;
    std::uint64_t seed = 0x5eed;
    // Overrides the seeded random bases [C, R] (running-bases mode).
    torch::Tensor init_bases;
    // Reuses a recorded inner state instead of iterating. The final coefficient
    // update still runs with gradients, so this isolates the one-step rule.
    const NmfState *replay = nullptr;
};

struct NmfResult {
    torch::Tensor reconstruction;  // [B, C, P]
    bool degenerate = false;       // rectified input was identically zero
    NmfState state;
};

/// Rank-r nonnegative reconstruction of relu(x), x: [B, C, P].
///
/// Multiplicative updates run `iters` times without gradient
/// from bases drawn by a generator seeded per call; coefficients start from
/// softmax(x^T bases). One more coefficient update runs with gradient and the
/// output is bases * coef^T.
NmfResult nmf_attention(const torch::Tensor &x, const NmfOptions &options);

// Records or replays NMF inner states so finite differences can be taken
// against the one-step gradient rule.
struct NmfStateCache {
    enum class Mode { Off, Record, Replay };
    Mode mode = Mode::Off;
    std::vector<NmfState> states;
    std::size_t cursor = 0;
};

int group_count(int channels);

class HamburgerImpl : public torch::nn::Module {
public:
    HamburgerImpl(int channels, const DecoderConfig &cfg);
    torch::Tensor forward(const torch::Tensor &x);

    void set_state_cache(std::shared_ptr<NmfStateCache> cache) { cache_ = std::move(cache); }
    bool last_degenerate() const { return last_degenerate_; }

private:
    DecoderConfig cfg_;
    torch::nn::Conv2d ham_in_{nullptr}, ham_out_{nullptr};
    torch::nn::GroupNorm ham_norm_{nullptr};
    torch::Tensor running_bases_;
    std::shared_ptr<NmfStateCache> cache_;
    bool last_degenerate_ = false;
};
TORCH_MODULE(Hamburger);

// Squeeze (1x1 + GN + ReLU) -> Hamburger -> align (1x1 + GN + ReLU).
class InterScaleImpl : public torch::nn::Module {
public:
    InterScaleImpl(int in_channels, const DecoderConfig &cfg);
    torch::Tensor forward(const torch::Tensor &x);

    int in_channels() const { return in_channels_; }
    Hamburger &hamburger() { return ham_; }

private:
    int in_channels_;
    torch::nn::Conv2d squeeze_{nullptr}, align_{nullptr};
    torch::nn::GroupNorm squeeze_norm_{nullptr}, align_norm_{nullptr};
    Hamburger ham_{nullptr};
};
TORCH_MODULE(InterScale);

// 1x1 convolution to class logits followed by bilinear upsampling.
class SegHeadImpl : public torch::nn::Module {
public:
    SegHeadImpl(int in_channels, int num_classes);
    torch::Tensor forward(const torch::Tensor &x, int64_t out_height, int64_t out_width);

    torch::nn::Conv2d &conv() { return conv_; }

private:
    torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(SegHead);

class FullScaleDecoderImpl : public torch::nn::Module {
public:
    FullScaleDecoderImpl(const std::array<int, 4> &stage_channels, const DecoderConfig &cfg);

    // Raw logits [B, num_classes, out_height, out_width].
    torch::Tensor forward(const StageFeatures &stages, int64_t out_height, int64_t out_width);

    // Width of the concatenated input to the InterScale block (or to the
    // fusion MLP), e.g. 960 for stages {2, 3, 4} of the full-size widths.
    int concat_channels() const { return concat_channels_; }
    const DecoderConfig &config() const { return cfg_; }

    InterScale &interscale() { return interscale_; }
    SegHead &seg() { return seg_; }
    void set_state_cache(std::shared_ptr<NmfStateCache> cache);

private:
    DecoderConfig cfg_;
    std::vector<int> stages_;  // 0-based
    int concat_channels_ = 0;
    std::vector<torch::nn::Conv2d> stage_mlps_;
    torch::nn::Conv2d fuse_{nullptr};
    torch::nn::GroupNorm fuse_norm_{nullptr};
    InterScale interscale_{nullptr};
    SegHead seg_{nullptr};
};
TORCH_MODULE(FullScaleDecoder);

// sigmoid(logits) > threshold, strictly. logits [B, 1, H, W] -> bool [B, H, W].
torch::Tensor predict_mask(const torch::Tensor &logits, double threshold = 0.5);

}  // namespace lsms
