#pragma once

#include "wxr/cwp.hpp"
#include "wxr/decoder.hpp"
#include "wxr/sar_encoder.hpp"

#include <torch/torch.h>

#include <string>
#include <vector>

namespace wxr {

class Teacher;

struct ModelConfig {
    EncoderConfig encoder;
    CwpConfig cwp;
    bool residual_output = false;
    // Source of the global weather prior: "teacher", "learnable" or "none".
    std::string prior_encoder = "teacher";
    int64_t teacher_dim = 512;

    void validate() const;
    DecoderConfig decoder() const;
};

// Small trainable conv encoder producing a teacher_dim embedding from the degraded image.
class LearnablePriorEncoderImpl : public torch::nn::Module {
public:
    explicit LearnablePriorEncoderImpl(int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& image);

    torch::nn::Sequential convs{nullptr};
    torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(LearnablePriorEncoder);

struct ModelOutput {
    torch::Tensor restored;                             // B x 3 x H x W in [0, 1]
    std::vector<std::vector<torch::Tensor>> residuals;  // encoder residual features [stage][block]
    std::vector<std::vector<torch::Tensor>> weights;    // weights maps [stage][block]
    torch::Tensor class_features;                       // B x teacher_dim (undefined without a prior)
    torch::Tensor prior;                                // B x C_bottleneck (undefined without a prior)
};

// Encoder -> CWP embedding (with global prior) -> decoder with the four encoder skips.
class RestorationModelImpl : public torch::nn::Module {
public:
    explicit RestorationModelImpl(ModelConfig config);

    // global_embedding: B x teacher_dim frozen embedding of `weather`; required for
    // the "teacher" prior, ignored otherwise.
    ModelOutput forward(const torch::Tensor& weather, const torch::Tensor& global_embedding = {});

    const ModelConfig& config() const { return config_; }

    SarEncoder encoder{nullptr};
    PriorProjector projector{nullptr};
    LearnablePriorEncoder learnable_prior{nullptr};
    CwpModule cwp{nullptr};
    Decoder decoder{nullptr};

private:
    ModelConfig config_;
};
TORCH_MODULE(RestorationModel);

// Full inference path: the prior teacher embeds the degraded image itself.
ModelOutput model_forward(RestorationModel& model, Teacher* prior_teacher, const torch::Tensor& weather);

} // namespace wxr
