#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace wxr {

// 8-bit RGB(A)/gray PNG -> 3 x H x W float32 in [0, 1].
torch::Tensor load_image(const std::filesystem::path& file);
// 3 x H x W (or 1 x H x W) in [0, 1] -> lossless 8-bit PNG. Values are clamped and rounded.
void save_image(const std::filesystem::path& file, const torch::Tensor& image);

// Center crop to the largest size that is a multiple of `multiple` in both dimensions.
torch::Tensor center_crop_to_multiple(const torch::Tensor& image, int64_t multiple);

} // namespace wxr
