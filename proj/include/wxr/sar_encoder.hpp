#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace wxr {

// Layouts used throughout:
//   feature map  B x C x H x W
//   token grid   B x (H*W) x C, row-major over (H, W)

struct EncoderConfig {
    std::vector<int64_t> blocks{3, 3, 3, 2};
    std::vector<int64_t> channels{32, 64, 128, 256};
    std::vector<int64_t> heads{1, 2, 4, 8};
    std::vector<int64_t> reductions{8, 4, 2, 1};
    std::vector<int64_t> strides{4, 2, 2, 2};
    int64_t in_channels = 3;
    int64_t num_kernels = 3;
    int64_t ffn_expansion = 4;
    // false drops the spatially-adaptive branch (plain DW feed-forward).
    bool use_sar = true;

    int64_t num_stages() const { return static_cast<int64_t>(blocks.size()); }
    int64_t total_stride() const;
    // Throws ConfigError on inconsistent lists, non-increasing channels, etc.
    void validate() const;
};

torch::Tensor map_to_tokens(const torch::Tensor& map);
torch::Tensor tokens_to_map(const torch::Tensor& tokens, int64_t height, int64_t width);

// Strided convolution that downsamples and widens, followed by channel layer norm.
class ConvProjectionImpl : public torch::nn::Module {
public:
    ConvProjectionImpl(int64_t in_channels, int64_t out_channels, int64_t stride);

    torch::Tensor forward(const torch::Tensor& x);

    int64_t in_channels() const { return in_channels_; }
    int64_t out_channels() const { return out_channels_; }
    int64_t stride() const { return stride_; }

    torch::nn::Conv2d conv{nullptr};
    torch::nn::LayerNorm norm{nullptr};

private:
    int64_t in_channels_;
    int64_t out_channels_;
    int64_t stride_;
};
TORCH_MODULE(ConvProjection);

// Multi-head self attention whose keys/values come from an r x r strided
// reduction of the token grid (r == 1 is plain MHSA).
class EfficientSelfAttentionImpl : public torch::nn::Module {
public:
    EfficientSelfAttentionImpl(int64_t dim, int64_t heads, int64_t reduction);

    torch::Tensor forward(const torch::Tensor& tokens, int64_t height, int64_t width);
    // Softmax weights, B x heads x L x L_kv.
    torch::Tensor attention_weights(const torch::Tensor& tokens, int64_t height, int64_t width);

    int64_t heads() const { return heads_; }
    int64_t reduction() const { return reduction_; }

    torch::nn::Linear query{nullptr};
    torch::nn::Linear key_value{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::nn::Conv2d reduce{nullptr};
    torch::nn::LayerNorm reduce_norm{nullptr};

private:
    torch::Tensor attend(const torch::Tensor& tokens, int64_t height, int64_t width, torch::Tensor* weights);

    int64_t dim_;
    int64_t heads_;
    int64_t reduction_;
};
TORCH_MODULE(EfficientSelfAttention);

// Per-location mixing weights for the kernel bank: sigmoid(pointwise(depthwise(x))).
class WeightsMapHeadImpl : public torch::nn::Module {
public:
    WeightsMapHeadImpl(int64_t channels, int64_t num_kernels);

    // Returns B x num_kernels x H x W with entries in (0, 1).
    torch::Tensor forward(const torch::Tensor& features);

    torch::nn::Conv2d depthwise{nullptr};
    torch::nn::Conv2d pointwise{nullptr};
};
TORCH_MODULE(WeightsMapHead);

/// Spatially-adaptive depthwise convolution.
///
/// At every location (x, y) the 3x3 depthwise kernel is the weights-map
/// mixture sum_j w_j(x, y) * bank_j. Zero padding of 1 keeps H x W; no bias.
///
/// \param features  B x C x H x W
/// \param bank      N x C x 3 x 3
/// \param weights   B x N x H x W
torch::Tensor spatially_adaptive_conv(const torch::Tensor& features, const torch::Tensor& bank,
                                      const torch::Tensor& weights);

class SpatiallyAdaptiveConvImpl : public torch::nn::Module {
public:
    SpatiallyAdaptiveConvImpl(int64_t channels, int64_t num_kernels);

    torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& weights);

    int64_t num_kernels() const { return bank.size(0); }

    torch::Tensor bank;
};
TORCH_MODULE(SpatiallyAdaptiveConv);

struct SarFfnOutput {
    torch::Tensor tokens;   // B x L x C
    torch::Tensor residual; // B x hidden x H x W, SAR branch output (DW output when SAR is off)
    torch::Tensor weights;  // B x N x H x W (undefined without SAR)
};

// Linear -> reshape -> DW(x) + SAR(x) -> GELU -> reshape -> Linear.
class SarFfnImpl : public torch::nn::Module {
public:
    SarFfnImpl(int64_t dim, int64_t expansion, int64_t num_kernels, bool use_sar);

    SarFfnOutput forward(const torch::Tensor& tokens, int64_t height, int64_t width);

    bool use_sar() const { return !sar.is_empty(); }
    int64_t hidden() const { return hidden_; }

    torch::nn::Linear fc1{nullptr};
    torch::nn::Conv2d depthwise{nullptr};
    WeightsMapHead weights_head{nullptr};
    SpatiallyAdaptiveConv sar{nullptr};
    torch::nn::Linear fc2{nullptr};

private:
    int64_t hidden_;
};
TORCH_MODULE(SarFfn);

struct SarBlockOutput {
    torch::Tensor tokens;
    torch::Tensor residual;
    torch::Tensor weights;
};

// Pre-norm transformer block: efficient attention + skip, then SARFFN + skip.
class SarBlockImpl : public torch::nn::Module {
public:
    SarBlockImpl(int64_t dim, int64_t heads, int64_t reduction, int64_t expansion, int64_t num_kernels,
                 bool use_sar);

    SarBlockOutput forward(const torch::Tensor& tokens, int64_t height, int64_t width);

    torch::nn::LayerNorm norm1{nullptr};
    EfficientSelfAttention attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    SarFfn ffn{nullptr};
};
TORCH_MODULE(SarBlock);

struct EncoderOutput {
    std::vector<torch::Tensor> skips;                   // one per stage, B x C_i x H_i x W_i
    torch::Tensor bottleneck;                           // last stage output
    std::vector<std::vector<torch::Tensor>> residuals;  // [stage][block]
    std::vector<std::vector<torch::Tensor>> weights;    // [stage][block] weights maps
};

class SarEncoderImpl : public torch::nn::Module {
public:
    explicit SarEncoderImpl(EncoderConfig config);

    // Throws InputSizeError unless H and W are multiples of total_stride().
    EncoderOutput forward(const torch::Tensor& image);

    const EncoderConfig& config() const { return config_; }

    torch::nn::ModuleList projections{nullptr};
    std::vector<torch::nn::ModuleList> stages;
    torch::nn::ModuleList stage_norms{nullptr};

private:
    EncoderConfig config_;
};
TORCH_MODULE(SarEncoder);

} // namespace wxr
