#include "lsms/decoder.hpp"

#include <numeric>
#include <string>

#include <ATen/CPUGeneratorImpl.h>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

constexpr double kNmfEps = 1e-6;

torch::Tensor multiplicative_coef_step(const torch::Tensor &x, const torch::Tensor &bases, const torch::Tensor &coef) {
    auto numerator = torch::bmm(x.transpose(1, 2), bases);                          // [B, P, R]
    auto denominator = torch::bmm(coef, torch::bmm(bases.transpose(1, 2), bases));  // [B, P, R]
    return coef * numerator / (denominator + kNmfEps);
}

torch::Tensor multiplicative_bases_step(const torch::Tensor &x, const torch::Tensor &bases, const torch::Tensor &coef) {
    auto numerator = torch::bmm(x, coef);                                           // [B, C, R]
    auto denominator = torch::bmm(bases, torch::bmm(coef.transpose(1, 2), coef));  // [B, C, R]
    return bases * numerator / (denominator + kNmfEps);
}

torch::nn::Conv2d pointwise(int in, int out, bool bias = true) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(bias));
}

}  // namespace

torch::Tensor bilinear_resize(const torch::Tensor &x, int64_t height, int64_t width) {
    if (x.size(-2) == height && x.size(-1) == width) return x;
    namespace F = torch::nn::functional;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

AlignedFeatures position_align(const StageFeatures &stages) {
    for (const auto &m : stages.maps) {
        if (!m.defined() || m.dim() != 4) throw Error(ErrorCode::ShapeMismatch, "position_align needs four stage maps");
    }
    const auto height = stages.maps[0].size(2);
    const auto width = stages.maps[0].size(3);
    AlignedFeatures out;
    for (int i = 0; i < 4; ++i) out.maps[i] = bilinear_resize(stages.maps[i], height, width);
    return out;
}

NmfResult nmf_attention(const torch::Tensor &input, const NmfOptions &options) {
    if (options.rank < 1 || options.iters < 1) {
        throw Error(ErrorCode::InvalidConfig, "NMF rank and iterations must be >= 1");
    }
    if (input.dim() != 3) throw Error(ErrorCode::ShapeMismatch, "nmf_attention expects [B, C, P]");
    auto x = torch::relu(input);
    const auto batch = x.size(0);
    const auto channels = x.size(1);

    NmfResult result;
    result.degenerate = !(x.detach() > 0).any().item<bool>();

    torch::Tensor bases;
    torch::Tensor coef;
    if (options.replay) {
        bases = options.replay->bases;
        coef = options.replay->coef;
        if (bases.size(0) != batch || bases.size(1) != channels || coef.size(1) != x.size(2)) {
            throw Error(ErrorCode::ShapeMismatch, "replayed NMF state does not match the input");
        }
    } else {
        torch::NoGradGuard no_grad;
        torch::Tensor init;
        if (options.init_bases.defined()) {
            init = options.init_bases.to(x.options());
        } else {
            auto gen = at::detail::createCPUGenerator(options.seed);
            init = torch::rand({channels, options.rank}, gen, x.options().device(torch::kCPU)).to(x.device());
        }
        init = torch::nn::functional::normalize(init, torch::nn::functional::NormalizeFuncOptions().dim(0));
        bases = init.unsqueeze(0).expand({batch, channels, options.rank}).contiguous();
        auto xd = x.detach();
        coef = torch::softmax(torch::bmm(xd.transpose(1, 2), bases), -1);
        for (int i = 0; i < options.iters; ++i) {
            coef = multiplicative_coef_step(xd, bases, coef);
            bases = multiplicative_bases_step(xd, bases, coef);
        }
    }
    result.state = {bases.detach(), coef.detach()};

    coef = multiplicative_coef_step(x, result.state.bases, result.state.coef);
    result.reconstruction = torch::bmm(result.state.bases, coef.transpose(1, 2));
    return result;
}

int group_count(int channels) {
    int g = std::gcd(channels, 32);
    while (g > 1 && channels / g < 2) g /= 2;
    return std::max(g, 1);
}

HamburgerImpl::HamburgerImpl(int channels, const DecoderConfig &cfg) : cfg_(cfg) {
    ham_in_ = register_module("ham_in", pointwise(channels, channels));
    ham_out_ = register_module("ham_out", pointwise(channels, channels, false));
    ham_norm_ = register_module("ham_norm", torch::nn::GroupNorm(group_count(channels), channels));
    if (cfg.running_bases) {
        auto gen = at::detail::createCPUGenerator(cfg.nmf_seed);
        running_bases_ = register_buffer("running_bases", torch::rand({channels, cfg.nmf_rank}, gen));
    }
}

torch::Tensor HamburgerImpl::forward(const torch::Tensor &x) {
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto z = torch::relu(ham_in_(x)).reshape({b, c, h * w});

    NmfOptions opts;
    opts.rank = cfg_.nmf_rank;
    opts.iters = cfg_.nmf_iters;
    opts.seed = cfg_.nmf_seed;
    if (running_bases_.defined()) opts.init_bases = running_bases_;
    if (cache_ && cache_->mode == NmfStateCache::Mode::Replay) {
        opts.replay = &cache_->states.at(cache_->cursor++);
    }
    auto nmf = nmf_attention(z, opts);
    last_degenerate_ = nmf.degenerate;
    if (cache_ && cache_->mode == NmfStateCache::Mode::Record) cache_->states.push_back(nmf.state);
    if (running_bases_.defined() && is_training() && !nmf.degenerate) {
        torch::NoGradGuard no_grad;
        running_bases_.mul_(0.9).add_(nmf.state.bases.mean(0).to(running_bases_.dtype()), 0.1);
    }

    auto out = ham_norm_(ham_out_(nmf.reconstruction.reshape({b, c, h, w})));
    return torch::relu(x + out);
}

InterScaleImpl::InterScaleImpl(int in_channels, const DecoderConfig &cfg) : in_channels_(in_channels) {
    const int c = cfg.squeeze_channels;
    squeeze_ = register_module("squeeze", pointwise(in_channels, c, false));
    squeeze_norm_ = register_module("squeeze_norm", torch::nn::GroupNorm(group_count(c), c));
    ham_ = register_module("ham", Hamburger(c, cfg));
    align_ = register_module("align", pointwise(c, c, false));
    align_norm_ = register_module("align_norm", torch::nn::GroupNorm(group_count(c), c));
}

torch::Tensor InterScaleImpl::forward(const torch::Tensor &x) {
    if (x.dim() != 4 || x.size(1) != in_channels_) {
        throw Error(ErrorCode::ShapeMismatch,
                    "InterScale expects " + std::to_string(in_channels_) + " input channels, got " +
                        std::to_string(x.dim() == 4 ? x.size(1) : -1));
    }
    auto y = torch::relu(squeeze_norm_(squeeze_(x)));
    y = ham_(y);
    return torch::relu(align_norm_(align_(y)));
}

SegHeadImpl::SegHeadImpl(int in_channels, int num_classes) {
    conv_ = register_module("conv", pointwise(in_channels, num_classes));
}

torch::Tensor SegHeadImpl::forward(const torch::Tensor &x, int64_t out_height, int64_t out_width) {
    if (x.dim() != 4 || out_height % x.size(2) != 0 || out_width % x.size(3) != 0) {
        throw Error(ErrorCode::ShapeMismatch, "segmentation output size must be a multiple of the feature size");
    }
    return bilinear_resize(conv_(x), out_height, out_width);
}

FullScaleDecoderImpl::FullScaleDecoderImpl(const std::array<int, 4> &stage_channels, const DecoderConfig &cfg)
    : cfg_(cfg) {
    cfg_.validate();
    const int squeeze = cfg.squeeze_channels;
    if (cfg.variant == DecoderVariant::NoFsd) {
        stages_ = {3};
        concat_channels_ = stage_channels[3];
        seg_ = register_module("seg", SegHead(stage_channels[3], cfg.num_classes));
        return;
    }
    for (int s : cfg.use_stages) stages_.push_back(s - 1);

    const bool stage_mlp = cfg.variant == DecoderVariant::MlpConcat || cfg.variant == DecoderVariant::MlpConcatHead;
    for (int s : stages_) {
        if (stage_mlp) {
            stage_mlps_.push_back(register_module("mlp" + std::to_string(s + 1), pointwise(stage_channels[s], squeeze)));
            concat_channels_ += squeeze;
        } else {
            concat_channels_ += stage_channels[s];
        }
    }
    if (cfg.variant == DecoderVariant::MlpConcat) {
        fuse_ = register_module("fuse", pointwise(concat_channels_, squeeze, false));
        fuse_norm_ = register_module("fuse_norm", torch::nn::GroupNorm(group_count(squeeze), squeeze));
    } else {
        interscale_ = register_module("interscale", InterScale(concat_channels_, cfg));
    }
    seg_ = register_module("seg", SegHead(squeeze, cfg.num_classes));
}

torch::Tensor FullScaleDecoderImpl::forward(const StageFeatures &stages, int64_t out_height, int64_t out_width) {
    const auto height = stages.maps[0].size(2);
    const auto width = stages.maps[0].size(3);
    if (cfg_.variant == DecoderVariant::NoFsd) {
        return seg_(bilinear_resize(stages.maps[3], height, width), out_height, out_width);
    }

    std::vector<torch::Tensor> parts;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        auto s = bilinear_resize(stages.maps[stages_[i]], height, width);
        if (!stage_mlps_.empty()) s = stage_mlps_[i](s);
        parts.push_back(s);
    }
    auto x = parts.size() == 1 ? parts.front() : torch::cat(parts, 1);
    if (cfg_.variant == DecoderVariant::MlpConcat) {
        x = torch::relu(fuse_norm_(fuse_(x)));
    } else {
        x = interscale_(x);
    }
    return seg_(x, out_height, out_width);
}

void FullScaleDecoderImpl::set_state_cache(std::shared_ptr<NmfStateCache> cache) {
    if (!interscale_.is_empty()) interscale_->hamburger()->set_state_cache(std::move(cache));
}

torch::Tensor predict_mask(const torch::Tensor &logits, double threshold) {
    if (logits.dim() != 4 || logits.size(1) != 1) {
        throw Error(ErrorCode::ShapeMismatch, "predict_mask expects single-class logits [B, 1, H, W]");
    }
    return (torch::sigmoid(logits) > threshold).squeeze(1);
}

}  // namespace lsms
