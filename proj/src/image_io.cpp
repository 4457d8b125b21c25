#include "lsms/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

// Planar <-> interleaved. OpenCV stores colour as BGR; planar order here is RGB.
cv::Mat to_mat(const Image8 &image) {
    if (image.channels == 1) {
        cv::Mat m(image.height, image.width, CV_8UC1);
        std::copy(image.data.begin(), image.data.end(), m.data);
        return m;
    }
    cv::Mat m(image.height, image.width, CV_8UC3);
    for (int y = 0; y < image.height; ++y) {
        auto *row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < image.width; ++x) {
            row[x] = cv::Vec3b(image.at(2, y, x), image.at(1, y, x), image.at(0, y, x));
        }
    }
    return m;
}

Image8 from_mat(const cv::Mat &mat, int channels) {
    cv::Mat src;
    if (channels == 1) {
        if (mat.channels() == 1) src = mat;
        else if (mat.channels() == 4) cv::cvtColor(mat, src, cv::COLOR_BGRA2GRAY);
        else cv::cvtColor(mat, src, cv::COLOR_BGR2GRAY);
    } else {
        if (mat.channels() == 3) src = mat;
        else if (mat.channels() == 4) cv::cvtColor(mat, src, cv::COLOR_BGRA2BGR);
        else cv::cvtColor(mat, src, cv::COLOR_GRAY2BGR);
    }
    if (src.depth() != CV_8U) src.convertTo(src, CV_8U);
    Image8 out(channels, src.rows, src.cols);
    for (int y = 0; y < src.rows; ++y) {
        if (channels == 1) {
            const auto *row = src.ptr<std::uint8_t>(y);
            std::copy(row, row + src.cols, &out.at(0, y, 0));
        } else {
            const auto *row = src.ptr<cv::Vec3b>(y);
            for (int x = 0; x < src.cols; ++x) {
                out.at(0, y, x) = row[x][2];
                out.at(1, y, x) = row[x][1];
                out.at(2, y, x) = row[x][0];
            }
        }
    }
    return out;
}

}  // namespace

void write_png(const std::filesystem::path &path, const Image8 &image) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_mat(image))) {
        throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
    }
}

Image8 read_image(const std::filesystem::path &path, int channels) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "missing raster " + path.string());
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw Error(ErrorCode::MalformedRecord, "cannot decode raster " + path.string());
    return from_mat(mat, channels);
}

Image8 decode_image(std::string_view bytes, int channels) {
    std::vector<std::uint8_t> buffer(bytes.begin(), bytes.end());
    cv::Mat mat = buffer.empty() ? cv::Mat() : cv::imdecode(buffer, cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw Error(ErrorCode::MalformedRecord, "undecodable image");
    return from_mat(mat, channels);
}

std::string encode_png(const Image8 &image) {
    std::vector<std::uint8_t> buffer;
    cv::imencode(".png", to_mat(image), buffer);
    return std::string(buffer.begin(), buffer.end());
}

Image8 mask_to_display(const Image8 &mask) {
    Image8 out = mask;
    for (auto &v : out.data) v = v ? 255 : 0;
    return out;
}

Image8 mask_from_display(const Image8 &raster) {
    Image8 out = raster;
    for (auto &v : out.data) v = v > 127 ? 1 : 0;
    return out;
}

Image8 resize(const Image8 &image, int height, int width, Interpolation mode) {
    if (image.height == height && image.width == width) return image;
    cv::Mat dst;
    cv::resize(to_mat(image), dst, cv::Size(width, height), 0, 0,
               mode == Interpolation::Nearest ? cv::INTER_NEAREST : cv::INTER_LINEAR);
    return from_mat(dst, image.channels);
}

torch::Tensor image_to_tensor(const Image8 &image) {
    auto bytes = torch::from_blob(const_cast<std::uint8_t *>(image.data.data()),
                                  {image.channels, image.height, image.width}, torch::kUInt8);
    return bytes.to(torch::kFloat32).div(255.0);
}

torch::Tensor mask_to_tensor(const Image8 &mask) {
    auto bytes = torch::from_blob(const_cast<std::uint8_t *>(mask.data.data()), {mask.height, mask.width}, torch::kUInt8);
    return (bytes > 0).to(torch::kFloat32);
}

Image8 mask_from_tensor(const torch::Tensor &mask) {
    auto m = (mask.detach().to(torch::kCPU).to(torch::kFloat32) > 0.5).to(torch::kUInt8).contiguous();
    TORCH_CHECK(m.dim() == 2, "mask_from_tensor expects [H, W]");
    Image8 out(1, static_cast<int>(m.size(0)), static_cast<int>(m.size(1)));
    std::copy(m.data_ptr<std::uint8_t>(), m.data_ptr<std::uint8_t>() + m.numel(), out.data.begin());
    return out;
}

Image8 image_from_tensor(const torch::Tensor &image) {
    auto t = image.detach().to(torch::kCPU).to(torch::kFloat32).clamp(0, 1).mul(255.0).round().to(torch::kUInt8).contiguous();
    TORCH_CHECK(t.dim() == 3, "image_from_tensor expects [C, H, W]");
    Image8 out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
    std::copy(t.data_ptr<std::uint8_t>(), t.data_ptr<std::uint8_t>() + t.numel(), out.data.begin());
    return out;
}

}  // namespace lsms
