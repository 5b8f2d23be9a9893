#include "wxr/sar_encoder.hpp"

#include "wxr/errors.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace F = torch::nn::functional;

namespace wxr {

namespace {

std::string shape_str(const torch::Tensor& t)
{
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

torch::Tensor layer_norm_channels(torch::nn::LayerNorm& norm, const torch::Tensor& map)
{
    return norm(map.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

} // namespace

int64_t EncoderConfig::total_stride() const
{
    int64_t s = 1;
    for (auto v : strides)
        s *= v;
    return s;
}

void EncoderConfig::validate() const
{
    const auto m = blocks.size();
    if (m == 0)
        throw ConfigError("encoder: at least one stage is required");
    if (channels.size() != m || heads.size() != m || reductions.size() != m || strides.size() != m)
        throw ConfigError("encoder: blocks/channels/heads/reductions/strides must have " + std::to_string(m) +
                          " entries each");
    if (num_kernels < 1)
        throw ConfigError("encoder: num_kernels must be >= 1");
    if (ffn_expansion < 1)
        throw ConfigError("encoder: ffn_expansion must be >= 1");
    for (size_t i = 0; i < m; ++i) {
        if (blocks[i] < 1 || channels[i] < 1 || heads[i] < 1 || reductions[i] < 1 || strides[i] < 1)
            throw ConfigError("encoder: stage " + std::to_string(i) + " has a non-positive parameter");
        if (channels[i] % heads[i] != 0)
            throw ConfigError("encoder: stage " + std::to_string(i) + " channels " + std::to_string(channels[i]) +
                              " not divisible by heads " + std::to_string(heads[i]));
        if (i > 0 && channels[i] <= channels[i - 1])
            throw ConfigError("encoder: channels must be strictly increasing across stages");
    }
}

torch::Tensor map_to_tokens(const torch::Tensor& map)
{
    return map.flatten(2).transpose(1, 2);
}

torch::Tensor tokens_to_map(const torch::Tensor& tokens, int64_t height, int64_t width)
{
    if (tokens.dim() != 3 || tokens.size(1) != height * width)
        throw ConfigError("token count " + std::to_string(tokens.dim() == 3 ? tokens.size(1) : -1) +
                          " does not form a " + std::to_string(height) + "x" + std::to_string(width) + " grid");
    return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), height, width});
}

// ---------------------------------------------------------------------------

ConvProjectionImpl::ConvProjectionImpl(int64_t in_channels, int64_t out_channels, int64_t stride)
    : in_channels_(in_channels), out_channels_(out_channels), stride_(stride)
{
    // Overlapping patches: 7x7 for the stride-4 stem, 3x3 elsewhere.
    const int64_t kernel = stride >= 4 ? 2 * stride - 1 : 3;
    conv = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, kernel).stride(stride).padding(kernel / 2)));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({out_channels})));
}

torch::Tensor ConvProjectionImpl::forward(const torch::Tensor& x)
{
    if (x.dim() != 4 || x.size(1) != in_channels_)
        throw ConfigError("conv projection expects " + std::to_string(in_channels_) + " input channels, got " +
                          shape_str(x));
    return layer_norm_channels(norm, conv(x));
}

// ---------------------------------------------------------------------------

EfficientSelfAttentionImpl::EfficientSelfAttentionImpl(int64_t dim, int64_t heads, int64_t reduction)
    : dim_(dim), heads_(heads), reduction_(reduction)
{
    if (heads < 1 || dim % heads != 0)
        throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    if (reduction < 1)
        throw ConfigError("attention: reduction ratio must be >= 1");
    query = register_module("query", torch::nn::Linear(dim, dim));
    key_value = register_module("key_value", torch::nn::Linear(dim, 2 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    if (reduction > 1) {
        reduce = register_module(
            "reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, reduction).stride(reduction)));
        reduce_norm = register_module("reduce_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    }
}

torch::Tensor EfficientSelfAttentionImpl::attend(const torch::Tensor& tokens, int64_t height, int64_t width,
                                                 torch::Tensor* weights)
{
    if (tokens.dim() != 3 || tokens.size(2) != dim_)
        throw ConfigError("attention expects B x L x " + std::to_string(dim_) + " tokens, got " + shape_str(tokens));
    if (tokens.size(1) != height * width)
        throw ConfigError("attention: token count does not match grid " + std::to_string(height) + "x" +
                          std::to_string(width));
    if (height % reduction_ != 0 || width % reduction_ != 0)
        throw ConfigError("attention: reduction ratio " + std::to_string(reduction_) + " does not divide grid " +
                          std::to_string(height) + "x" + std::to_string(width));

    const auto batch = tokens.size(0);
    const auto len = tokens.size(1);
    const auto head_dim = dim_ / heads_;

    auto q = query(tokens).view({batch, len, heads_, head_dim}).transpose(1, 2);

    torch::Tensor kv_source = tokens;
    if (reduction_ > 1) {
        auto reduced = reduce(tokens_to_map(tokens, height, width));
        kv_source = reduce_norm(map_to_tokens(reduced));
    }
    const auto kv_len = kv_source.size(1);
    auto kv = key_value(kv_source).view({batch, kv_len, 2, heads_, head_dim}).permute({2, 0, 3, 1, 4});
    auto k = kv[0];
    auto v = kv[1];

    auto scores = torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(head_dim)));
    auto probs = torch::softmax(scores, -1);
    if (weights)
        *weights = probs;
    auto out = torch::matmul(probs, v).transpose(1, 2).reshape({batch, len, dim_});
    return proj(out);
}

torch::Tensor EfficientSelfAttentionImpl::forward(const torch::Tensor& tokens, int64_t height, int64_t width)
{
    return attend(tokens, height, width, nullptr);
}

torch::Tensor EfficientSelfAttentionImpl::attention_weights(const torch::Tensor& tokens, int64_t height, int64_t width)
{
    torch::Tensor w;
    attend(tokens, height, width, &w);
    return w;
}

// ---------------------------------------------------------------------------

WeightsMapHeadImpl::WeightsMapHeadImpl(int64_t channels, int64_t num_kernels)
{
    depthwise = register_module(
        "depthwise", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).groups(channels)));
    pointwise = register_module("pointwise", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, num_kernels, 1)));
}

torch::Tensor WeightsMapHeadImpl::forward(const torch::Tensor& features)
{
    return torch::sigmoid(pointwise(depthwise(features)));
}

// ---------------------------------------------------------------------------

torch::Tensor spatially_adaptive_conv(const torch::Tensor& features, const torch::Tensor& bank,
                                      const torch::Tensor& weights)
{
    if (features.dim() != 4)
        throw ConfigError("spatially_adaptive_conv: features must be B x C x H x W, got " + shape_str(features));
    const auto batch = features.size(0);
    const auto channels = features.size(1);
    const auto height = features.size(2);
    const auto width = features.size(3);
    if (bank.dim() != 4 || bank.size(1) != channels || bank.size(2) != 3 || bank.size(3) != 3)
        throw ConfigError("spatially_adaptive_conv: bank must be N x " + std::to_string(channels) + " x 3 x 3, got " +
                          shape_str(bank));
    const auto kernels = bank.size(0);
    if (weights.dim() != 4 || weights.size(0) != batch || weights.size(1) != kernels || weights.size(2) != height ||
        weights.size(3) != width)
        throw ConfigError("spatially_adaptive_conv: weights map " + shape_str(weights) + " does not match " +
                          std::to_string(kernels) + " kernels over " + std::to_string(height) + "x" +
                          std::to_string(width));

    // Mixing is linear, so filtering with every bank kernel and blending the
    // responses per pixel equals filtering with the per-pixel mixed kernel.
    // Grouped conv output channel c*N + j is channel c filtered by kernel j.
    auto grouped = bank.transpose(0, 1).reshape({channels * kernels, 1, 3, 3});
    auto responses = F::conv2d(features, grouped, F::Conv2dFuncOptions().padding(1).groups(channels));
    responses = responses.view({batch, channels, kernels, height, width});
    return (responses * weights.unsqueeze(1)).sum(2);
}

SpatiallyAdaptiveConvImpl::SpatiallyAdaptiveConvImpl(int64_t channels, int64_t num_kernels)
{
    // Same bound as the default 3x3 depthwise init (fan_in = 9).
    bank = register_parameter("bank", torch::empty({num_kernels, channels, 3, 3}).uniform_(-1.0 / 3.0, 1.0 / 3.0));
}

torch::Tensor SpatiallyAdaptiveConvImpl::forward(const torch::Tensor& features, const torch::Tensor& weights)
{
    return spatially_adaptive_conv(features, bank, weights);
}

// ---------------------------------------------------------------------------

SarFfnImpl::SarFfnImpl(int64_t dim, int64_t expansion, int64_t num_kernels, bool use_sar)
    : hidden_(dim * expansion)
{
    fc1 = register_module("fc1", torch::nn::Linear(dim, hidden_));
    depthwise = register_module(
        "depthwise", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden_, hidden_, 3).padding(1).groups(hidden_)));
    if (use_sar) {
        weights_head = register_module("weights_head", WeightsMapHead(hidden_, num_kernels));
        sar = register_module("sar", SpatiallyAdaptiveConv(hidden_, num_kernels));
    }
    fc2 = register_module("fc2", torch::nn::Linear(hidden_, dim));
}

SarFfnOutput SarFfnImpl::forward(const torch::Tensor& tokens, int64_t height, int64_t width)
{
    SarFfnOutput out;
    auto local = tokens_to_map(fc1(tokens), height, width);
    auto mixed = depthwise(local);
    if (use_sar()) {
        out.weights = weights_head(local);
        out.residual = sar(local, out.weights);
        mixed = mixed + out.residual;
    } else {
        // Without the SAR branch the DW features stand in for distillation.
        out.residual = mixed;
    }
    out.tokens = fc2(map_to_tokens(torch::gelu(mixed)));
    return out;
}

// ---------------------------------------------------------------------------

SarBlockImpl::SarBlockImpl(int64_t dim, int64_t heads, int64_t reduction, int64_t expansion, int64_t num_kernels,
                           bool use_sar)
{
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", EfficientSelfAttention(dim, heads, reduction));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    ffn = register_module("ffn", SarFfn(dim, expansion, num_kernels, use_sar));
}

SarBlockOutput SarBlockImpl::forward(const torch::Tensor& tokens, int64_t height, int64_t width)
{
    auto x = tokens + attn(norm1(tokens), height, width);
    auto ffn_out = ffn(norm2(x), height, width);
    return {x + ffn_out.tokens, ffn_out.residual, ffn_out.weights};
}

// ---------------------------------------------------------------------------

SarEncoderImpl::SarEncoderImpl(EncoderConfig config) : config_(std::move(config))
{
    config_.validate();
    projections = register_module("projections", torch::nn::ModuleList());
    stage_norms = register_module("stage_norms", torch::nn::ModuleList());
    int64_t in_ch = config_.in_channels;
    for (int64_t s = 0; s < config_.num_stages(); ++s) {
        const auto ch = config_.channels[s];
        projections->push_back(ConvProjection(in_ch, ch, config_.strides[s]));
        auto blocks = torch::nn::ModuleList();
        for (int64_t b = 0; b < config_.blocks[s]; ++b)
            blocks->push_back(SarBlock(ch, config_.heads[s], config_.reductions[s], config_.ffn_expansion,
                                       config_.num_kernels, config_.use_sar));
        stages.push_back(register_module("stage" + std::to_string(s), blocks));
        stage_norms->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({ch})));
        in_ch = ch;
    }
}

EncoderOutput SarEncoderImpl::forward(const torch::Tensor& image)
{
    if (image.dim() != 4 || image.size(1) != config_.in_channels)
        throw ConfigError("encoder expects B x " + std::to_string(config_.in_channels) + " x H x W input, got " +
                          shape_str(image));
    const auto multiple = config_.total_stride();
    if (image.size(2) % multiple != 0 || image.size(3) % multiple != 0)
        throw InputSizeError("input size " + std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)) +
                             " must be a multiple of " + std::to_string(multiple) + " in both dimensions");

    EncoderOutput out;
    auto x = image;
    for (int64_t s = 0; s < config_.num_stages(); ++s) {
        x = projections[s]->as<ConvProjectionImpl>()->forward(x);
        const auto height = x.size(2);
        const auto width = x.size(3);
        if (height % config_.reductions[s] != 0 || width % config_.reductions[s] != 0)
            throw InputSizeError("stage " + std::to_string(s) + " grid " + std::to_string(height) + "x" +
                                 std::to_string(width) + " is not divisible by reduction ratio " +
                                 std::to_string(config_.reductions[s]));
        auto tokens = map_to_tokens(x);
        std::vector<torch::Tensor> residuals;
        std::vector<torch::Tensor> weights;
        for (const auto& module : *stages[s]) {
            auto block_out = module->as<SarBlockImpl>()->forward(tokens, height, width);
            tokens = block_out.tokens;
            residuals.push_back(block_out.residual);
            weights.push_back(block_out.weights);
        }
        tokens = stage_norms[s]->as<torch::nn::LayerNormImpl>()->forward(tokens);
        x = tokens_to_map(tokens, height, width);
        out.skips.push_back(x);
        out.residuals.push_back(std::move(residuals));
        out.weights.push_back(std::move(weights));
    }
    out.bottleneck = x;
    return out;
}

} // namespace wxr
