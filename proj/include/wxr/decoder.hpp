#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace wxr {

struct DecoderConfig {
    // Encoder channels per stage, shallow to deep.
    std::vector<int64_t> encoder_channels{32, 64, 128, 256};
    // Encoder downsampling per stage; the decoder mirrors it in reverse.
    std::vector<int64_t> encoder_strides{4, 2, 2, 2};
    // Predict a residual added to the degraded input instead of the image itself.
    bool residual_output = false;

    // Output channels of each up-stage, deep to shallow.
    std::vector<int64_t> up_channels() const;
};

/// Convolutional U-Net style decoder.
///
/// Up-stage k concatenates the matching encoder skip (deepest first), applies
/// two 3x3 conv + GELU, upsamples (nearest) by the mirrored encoder stride and
/// refines with one more 3x3 conv. A final 3x3 conv produces RGB through a
/// sigmoid (or a clamped residual over the input).
class DecoderImpl : public torch::nn::Module {
public:
    explicit DecoderImpl(DecoderConfig config);

    // skips shallow to deep, as produced by the encoder. `input` is only read in residual mode.
    torch::Tensor forward(const torch::Tensor& bottleneck, const std::vector<torch::Tensor>& skips,
                          const torch::Tensor& input = {});

    const DecoderConfig& config() const { return config_; }

    torch::nn::ModuleList fuse{nullptr};
    torch::nn::ModuleList refine{nullptr};
    torch::nn::Conv2d head{nullptr};

private:
    DecoderConfig config_;
};
TORCH_MODULE(Decoder);

} // namespace wxr
