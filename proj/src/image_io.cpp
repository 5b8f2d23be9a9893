#include "wxr/image_io.hpp"

#include "wxr/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace wxr {

torch::Tensor load_image(const std::filesystem::path& file)
{
    cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (img.empty())
        throw IoError("cannot read image " + file.string());
    if (!img.isContinuous())
        img = img.clone();
    // OpenCV stores BGR.
    auto t = torch::from_blob(img.data, {img.rows, img.cols, 3}, torch::kUInt8).flip({2}).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

void save_image(const std::filesystem::path& file, const torch::Tensor& image)
{
    if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1))
        throw ConfigError("save_image expects 3 x H x W or 1 x H x W");
    auto bytes = torch::round(image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                     .to(torch::kUInt8)
                     .permute({1, 2, 0});
    if (image.size(0) == 3)
        bytes = bytes.flip({2});
    bytes = bytes.contiguous();
    const int rows = static_cast<int>(bytes.size(0));
    const int cols = static_cast<int>(bytes.size(1));
    cv::Mat out(rows, cols, image.size(0) == 3 ? CV_8UC3 : CV_8UC1, bytes.data_ptr());
    if (file.has_parent_path())
        std::filesystem::create_directories(file.parent_path());
    if (!cv::imwrite(file.string(), out))
        throw IoError("cannot write image " + file.string());
}

torch::Tensor center_crop_to_multiple(const torch::Tensor& image, int64_t multiple)
{
    const auto h = image.size(-2) / multiple * multiple;
    const auto w = image.size(-1) / multiple * multiple;
    if (h == 0 || w == 0)
        throw InputSizeError("image " + std::to_string(image.size(-2)) + "x" + std::to_string(image.size(-1)) +
                             " is smaller than the required multiple " + std::to_string(multiple));
    const auto top = (image.size(-2) - h) / 2;
    const auto left = (image.size(-1) - w) / 2;
    return image.narrow(-2, top, h).narrow(-1, left, w);
}

} // namespace wxr
