#include "lsms/visualize.hpp"

#include <opencv2/imgproc.hpp>

#include "lsms/decoder.hpp"
#include "lsms/errors.hpp"

namespace lsms {

StageHeatmaps stage_heatmaps(LsmsModel &model, const Image8 &image, const std::string &expression, double threshold) {
    torch::NoGradGuard guard;
    model->eval();
    const auto &cfg = model->config();
    const bool same = image.height == cfg.image_height && image.width == cfg.image_width;
    const auto input = image_to_tensor(same ? image : resize(image, cfg.image_height, cfg.image_width,
                                                             Interpolation::Bilinear))
                           .unsqueeze(0);
    const auto text = model->encode_text(model->tokenize(std::vector<std::string>{expression}));
    const auto out = model->forward_full(input, text);

    StageHeatmaps h;
    for (int s = 0; s < 4; ++s) {
        const auto mean = out.stages.maps[static_cast<std::size_t>(s)].mean(1, true);
        h.maps[static_cast<std::size_t>(s)] = bilinear_resize(mean, image.height, image.width)[0][0].contiguous();
    }
    auto logits = bilinear_resize(out.logits, image.height, image.width);
    h.prediction = predict_mask(logits, threshold)[0];
    return h;
}

std::pair<int, int> heatmap_argmax(const torch::Tensor &map) {
    if (map.dim() != 2) throw Error(ErrorCode::ShapeMismatch, "heatmap must be [H, W]");
    const auto flat = map.flatten().argmax().item<std::int64_t>();
    return {static_cast<int>(flat / map.size(1)), static_cast<int>(flat % map.size(1))};
}

Image8 render_heatmap(const torch::Tensor &map) {
    auto m = map.to(torch::kFloat).contiguous();
    const float lo = m.min().item<float>();
    const float hi = m.max().item<float>();
    const auto scaled = hi > lo ? (m - lo) / (hi - lo) : torch::zeros_like(m);
    const auto bytes = (scaled * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
    const int height = static_cast<int>(m.size(0));
    const int width = static_cast<int>(m.size(1));
    cv::Mat gray(height, width, CV_8UC1, bytes.data_ptr<std::uint8_t>());
    cv::Mat color;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    Image8 out(3, height, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const auto &bgr = color.at<cv::Vec3b>(y, x);
            out.at(0, y, x) = bgr[2];
            out.at(1, y, x) = bgr[1];
            out.at(2, y, x) = bgr[0];
        }
    }
    return out;
}

Image8 render_overlay(const Image8 &image, const torch::Tensor &prediction, const Image8 *gt_mask) {
    Image8 out(3, image.height, image.width);
    const auto pred = prediction.to(torch::kBool).contiguous();
    const auto p = pred.accessor<bool, 2>();
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            int gray = 0;
            for (int c = 0; c < image.channels; ++c) gray += image.at(c, y, x);
            gray /= std::max(1, image.channels);
            double rgb[3] = {static_cast<double>(gray), static_cast<double>(gray), static_cast<double>(gray)};
            auto blend = [&](int channel) {
                for (int c = 0; c < 3; ++c) rgb[c] *= 0.5;
                rgb[channel] += 127.5;
            };
            if (gt_mask && !gt_mask->empty() && gt_mask->at(0, y, x)) blend(0);
            if (p[y][x]) blend(1);
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<std::uint8_t>(std::lround(rgb[c]));
        }
    }
    return out;
}

std::vector<std::filesystem::path> visualize_stages(LsmsModel &model, const Image8 &image, const std::string &expression,
                                                    const Image8 &gt_mask, const std::filesystem::path &out_dir,
                                                    double threshold) {
    const auto h = stage_heatmaps(model, image, expression, threshold);
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> files;
    for (int s = 0; s < 4; ++s) {
        files.push_back(out_dir / ("stage" + std::to_string(s + 1) + ".png"));
        write_png(files.back(), render_heatmap(h.maps[static_cast<std::size_t>(s)]));
    }
    files.push_back(out_dir / "overlay.png");
    write_png(files.back(), render_overlay(image, h.prediction, gt_mask.empty() ? nullptr : &gt_mask));
    return files;
}

}  // namespace lsms
