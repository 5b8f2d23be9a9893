#include "wxr/model.hpp"

#include "wxr/errors.hpp"
#include "wxr/teacher.hpp"

namespace wxr {

void ModelConfig::validate() const
{
    encoder.validate();
    if (prior_encoder != "teacher" && prior_encoder != "learnable" && prior_encoder != "none")
        throw ConfigError("model.prior_encoder must be 'teacher', 'learnable' or 'none'");
    if (cwp.num_blocks < 0 || cwp.prior_tokens < 1 || cwp.heads < 1)
        throw ConfigError("cwp: num_blocks >= 0, prior_tokens >= 1 and heads >= 1 required");
    if (encoder.channels.back() % cwp.heads != 0)
        throw ConfigError("cwp: bottleneck channels " + std::to_string(encoder.channels.back()) +
                          " not divisible by heads " + std::to_string(cwp.heads));
    if (teacher_dim < 1)
        throw ConfigError("model.teacher_dim must be positive");
}

DecoderConfig ModelConfig::decoder() const
{
    return {encoder.channels, encoder.strides, residual_output};
}

LearnablePriorEncoderImpl::LearnablePriorEncoderImpl(int64_t out_dim)
{
    auto conv = [](int64_t in, int64_t out) {
        return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1));
    };
    convs = register_module("convs", torch::nn::Sequential(conv(3, 32), torch::nn::GELU(), conv(32, 64),
                                                           torch::nn::GELU(), conv(64, 128), torch::nn::GELU()));
    fc = register_module("fc", torch::nn::Linear(128, out_dim));
}

torch::Tensor LearnablePriorEncoderImpl::forward(const torch::Tensor& image)
{
    return fc(convs->forward(image).mean({2, 3}));
}

RestorationModelImpl::RestorationModelImpl(ModelConfig config) : config_(std::move(config))
{
    config_.validate();
    const auto bottleneck = config_.encoder.channels.back();
    encoder = register_module("encoder", SarEncoder(config_.encoder));
    if (config_.prior_encoder != "none")
        projector = register_module("projector", PriorProjector(config_.teacher_dim, bottleneck));
    if (config_.prior_encoder == "learnable")
        learnable_prior = register_module("learnable_prior", LearnablePriorEncoder(config_.teacher_dim));
    cwp = register_module("cwp", CwpModule(bottleneck, config_.cwp));
    if (config_.prior_encoder == "none")
        cwp->freeze_fusion_weights();
    decoder = register_module("decoder", Decoder(config_.decoder()));
}

ModelOutput RestorationModelImpl::forward(const torch::Tensor& weather, const torch::Tensor& global_embedding)
{
    ModelOutput out;
    auto enc = encoder(weather);
    out.residuals = std::move(enc.residuals);
    out.weights = std::move(enc.weights);

    torch::Tensor embedding;
    if (config_.prior_encoder == "teacher") {
        if (!global_embedding.defined())
            throw ConfigError("model: the teacher prior requires a global embedding");
        embedding = global_embedding.to(weather.dtype());
    } else if (config_.prior_encoder == "learnable") {
        embedding = learnable_prior(weather);
    }
    if (embedding.defined()) {
        auto projected = projector(embedding);
        out.class_features = projected.class_features;
        out.prior = projected.prior;
    }

    auto fused = cwp(enc.bottleneck, out.prior);
    out.restored = decoder(fused, enc.skips, weather);
    return out;
}

ModelOutput model_forward(RestorationModel& model, Teacher* prior_teacher, const torch::Tensor& weather)
{
    torch::Tensor embedding;
    if (model->config().prior_encoder == "teacher") {
        if (!prior_teacher)
            throw ConfigError("model_forward: teacher prior configured but no teacher given");
        embedding = prior_teacher->extract_global_embedding(weather);
    }
    return model->forward(weather, embedding);
}

} // namespace wxr
