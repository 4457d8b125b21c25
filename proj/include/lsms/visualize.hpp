#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lsms/model.hpp"
#include "lsms/synthetic.hpp"

namespace lsms {

struct StageHeatmaps {
    // Channel mean of F_i per stage, bilinearly resized to the image size [H, W].
    std::array<torch::Tensor, 4> maps;
    torch::Tensor prediction;  // bool [H, W]
};

// Runs the model on one sample (eval mode) and collects the heatmaps.
StageHeatmaps stage_heatmaps(LsmsModel &model, const Image8 &image, const std::string &expression,
                             double threshold = 0.5);

// Row/column of the maximum of a [H, W] map (first in row-major order on ties).
std::pair<int, int> heatmap_argmax(const torch::Tensor &map);

// Min-max normalised colour rendering; constant maps render as one colour.
Image8 render_heatmap(const torch::Tensor &map);

// Grayscale image with the ground truth in red and the prediction in green.
Image8 render_overlay(const Image8 &image, const torch::Tensor &prediction, const Image8 *gt_mask);

/// Writes stage1.png .. stage4.png and overlay.png into out_dir and returns
/// their paths. `gt_mask` may be empty.
std::vector<std::filesystem::path> visualize_stages(LsmsModel &model, const Image8 &image, const std::string &expression,
                                                    const Image8 &gt_mask, const std::filesystem::path &out_dir,
                                                    double threshold = 0.5);

}  // namespace lsms
