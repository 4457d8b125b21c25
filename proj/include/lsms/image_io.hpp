#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace lsms {

// Planar 8-bit raster, channel-major (C x H x W). Masks use one channel with
// values 0/1 in memory and 0/255 on disk.
struct Image8 {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Image8() = default;
    Image8(int c, int h, int w, std::uint8_t fill = 0)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::uint8_t &at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    std::uint8_t at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool empty() const { return data.empty(); }
    bool operator==(const Image8 &) const = default;
};

enum class Interpolation { Nearest, Bilinear };

void write_png(const std::filesystem::path &path, const Image8 &image);
// Reads any raster OpenCV understands and converts to `channels` (1 or 3).
Image8 read_image(const std::filesystem::path &path, int channels);
// Same as read_image for an in-memory encoded raster; throws on failure.
Image8 decode_image(std::string_view bytes, int channels);
std::string encode_png(const Image8 &image);

// Mask helpers: 0/1 <-> 0/255.
Image8 mask_to_display(const Image8 &mask);
Image8 mask_from_display(const Image8 &raster);

Image8 resize(const Image8 &image, int height, int width, Interpolation mode);

// [C, H, W] float in [0, 1] (value / 255).
torch::Tensor image_to_tensor(const Image8 &image);
// Binary mask [H, W] float 0/1.
torch::Tensor mask_to_tensor(const Image8 &mask);
// bool/uint8/float [H, W] -> 0/1 mask.
Image8 mask_from_tensor(const torch::Tensor &mask);
// float [C, H, W] in [0, 1] -> 8-bit.
Image8 image_from_tensor(const torch::Tensor &image);

}  // namespace lsms
