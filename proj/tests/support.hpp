#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace lsms::test {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // name of the tensor with the largest error
    std::int64_t checked = 0;
    double max_zero_grad_abs = 0.0;
};

/// Compares autograd gradients of `loss()` against central differences for
/// every element of every tensor in `targets` (double precision expected).
/// Error per tensor: max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|).
/// Tensors whose gradients are all below kZeroGrad are reported in
/// max_zero_grad_abs instead.
inline constexpr double kZeroGrad = 1e-6;

inline GradCheckResult grad_check(const std::function<torch::Tensor()> &loss,
                                  const std::vector<std::pair<std::string, torch::Tensor>> &targets,
                                  double eps = 1e-6) {
    for (const auto &[name, t] : targets) {
        if (t.grad().defined()) t.mutable_grad().zero_();
    }
    loss().backward();
    std::vector<torch::Tensor> analytic;
    for (const auto &[name, t] : targets) {
        analytic.push_back(t.grad().defined() ? t.grad().clone() : torch::zeros_like(t));
    }

    GradCheckResult result;
    torch::NoGradGuard guard;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        auto flat = targets[k].second.view({-1});
        auto numeric = torch::zeros_like(flat);
        for (std::int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + eps;
            const double up = loss().item<double>();
            flat[i] = orig - eps;
            const double down = loss().item<double>();
            flat[i] = orig;
            numeric[i] = (up - down) / (2 * eps);
        }
        const auto a = analytic[k].view({-1});
        const double scale = std::max(a.abs().max().item<double>(), numeric.abs().max().item<double>());
        const double diff = (a - numeric).abs().max().item<double>();
        result.checked += flat.numel();
        // Gradients that vanish identically (a bias feeding a normalisation or
        // a softmax shift) have no relative error; they are checked absolutely.
        if (scale < kZeroGrad) {
            result.max_zero_grad_abs = std::max(result.max_zero_grad_abs, diff);
            continue;
        }
        const double err = diff / scale;
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst = targets[k].first;
        }
    }
    return result;
}

inline std::vector<std::pair<std::string, torch::Tensor>> named_params(torch::nn::Module &m) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto &p : m.named_parameters()) out.emplace_back(p.key(), p.value());
    return out;
}

// Fixed scalar projection of a tensor so gradients are non-trivial.
inline torch::Tensor probe_loss(const torch::Tensor &y, std::uint64_t seed = 11) {
    auto gen = at::detail::createCPUGenerator(seed);
    auto w = torch::randn(y.sizes(), gen, y.options().requires_grad(false));
    return (y * w).sum() + 0.5 * (y * y).mean();
}

}  // namespace lsms::test
