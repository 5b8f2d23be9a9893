#include "wxr/decoder.hpp"

#include "wxr/errors.hpp"

#include <string>

namespace F = torch::nn::functional;

namespace wxr {

namespace {

torch::nn::Conv2d conv3x3(int64_t in, int64_t out)
{
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

class GeluImpl : public torch::nn::Module {
public:
    torch::Tensor forward(const torch::Tensor& x) { return torch::gelu(x); }
};
TORCH_MODULE(Gelu);

} // namespace

std::vector<int64_t> DecoderConfig::up_channels() const
{
    const auto m = encoder_channels.size();
    std::vector<int64_t> out;
    for (size_t k = 0; k + 1 < m; ++k)
        out.push_back(encoder_channels[m - 2 - k]);
    out.push_back(std::max<int64_t>(encoder_channels.front() / 2, 8));
    return out;
}

DecoderImpl::DecoderImpl(DecoderConfig config) : config_(std::move(config))
{
    if (config_.encoder_channels.empty() || config_.encoder_channels.size() != config_.encoder_strides.size())
        throw ConfigError("decoder: encoder_channels and encoder_strides must be non-empty and equal length");
    fuse = register_module("fuse", torch::nn::ModuleList());
    refine = register_module("refine", torch::nn::ModuleList());
    const auto m = config_.encoder_channels.size();
    const auto outs = config_.up_channels();
    int64_t in_ch = config_.encoder_channels.back();
    for (size_t k = 0; k < m; ++k) {
        const auto skip_ch = config_.encoder_channels[m - 1 - k];
        fuse->push_back(torch::nn::Sequential(conv3x3(in_ch + skip_ch, outs[k]), Gelu(), conv3x3(outs[k], outs[k]),
                                              Gelu()));
        refine->push_back(torch::nn::Sequential(conv3x3(outs[k], outs[k]), Gelu()));
        in_ch = outs[k];
    }
    head = register_module("head", conv3x3(in_ch, 3));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& bottleneck, const std::vector<torch::Tensor>& skips,
                                   const torch::Tensor& input)
{
    const auto m = config_.encoder_channels.size();
    if (skips.size() != m)
        throw ConfigError("decoder expects " + std::to_string(m) + " skips, got " + std::to_string(skips.size()));
    auto x = bottleneck;
    for (size_t k = 0; k < m; ++k) {
        const auto& skip = skips[m - 1 - k];
        if (skip.size(1) != config_.encoder_channels[m - 1 - k] || skip.size(2) != x.size(2) ||
            skip.size(3) != x.size(3))
            throw ConfigError("decoder: skip " + std::to_string(m - 1 - k) + " does not match the pyramid at " +
                              std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
        x = fuse[k]->as<torch::nn::SequentialImpl>()->forward(torch::cat({x, skip}, 1));
        const double scale = static_cast<double>(config_.encoder_strides[m - 1 - k]);
        x = F::interpolate(x, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{scale, scale})
                                  .mode(torch::kNearest));
        x = refine[k]->as<torch::nn::SequentialImpl>()->forward(x);
    }
    auto out = head(x);
    if (config_.residual_output) {
        if (!input.defined() || input.sizes() != out.sizes())
            throw ConfigError("decoder: residual output requires the input image");
        return (input + out).clamp(0.0, 1.0);
    }
    return torch::sigmoid(out);
}

} // namespace wxr
