#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace wxr {

struct LossWeights {
    double perceptual = 0.04;
    double ssim = 0.1;
    double psnr = 0.02;
    double text = 0.08;
    double distill = 0.1;

    void validate() const;
};

// Individual (unweighted) loss terms of one step. Undefined entries count as 0.
struct LossTerms {
    torch::Tensor smooth_l1;
    torch::Tensor perceptual;
    torch::Tensor ssim;
    torch::Tensor psnr;
    torch::Tensor text;
    torch::Tensor distill;
};

// Images are B x C x H x W (a single C x H x W image is accepted where noted).

// Huber loss with transition point beta, mean-reduced.
torch::Tensor smooth_l1(const torch::Tensor& output, const torch::Tensor& target, double beta = 1.0);

// Frozen feature extractor for the perceptual loss.
class PerceptualExtractor {
public:
    virtual ~PerceptualExtractor() = default;
    virtual std::vector<torch::Tensor> features(const torch::Tensor& images) = 0;
    virtual std::string name() const = 0;
};

// Seeded random conv net: conv3x3 -> ReLU per layer, stride 1 then 2.
class StubPerceptualExtractor : public PerceptualExtractor {
public:
    StubPerceptualExtractor(uint64_t seed, std::vector<int64_t> channels = {8, 16, 32});
    // Explicit weights (out x in x 3 x 3) and biases, e.g. for hand-checked tests.
    StubPerceptualExtractor(std::vector<torch::Tensor> weights, std::vector<torch::Tensor> biases);

    std::vector<torch::Tensor> features(const torch::Tensor& images) override;
    std::string name() const override { return "stub"; }

    const std::vector<torch::Tensor>& weights() const { return weights_; }
    const std::vector<torch::Tensor>& biases() const { return biases_; }

private:
    std::vector<torch::Tensor> weights_;
    std::vector<torch::Tensor> biases_;
};

// TorchScript module whose forward(x) returns List[Tensor] (e.g. VGG relu1_2..relu3_3).
class TorchScriptPerceptualExtractor : public PerceptualExtractor {
public:
    explicit TorchScriptPerceptualExtractor(const std::filesystem::path& file);
    ~TorchScriptPerceptualExtractor() override;

    std::vector<torch::Tensor> features(const torch::Tensor& images) override;
    std::string name() const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Loads `file` when it exists, else warns on stderr and returns the stub.
std::unique_ptr<PerceptualExtractor> make_perceptual_extractor(const std::string& file, uint64_t seed);

// Sum over layers of mean squared feature difference. Target features carry no gradient.
torch::Tensor perceptual_loss(const torch::Tensor& output, const torch::Tensor& target,
                              PerceptualExtractor& extractor);

// Normalized 2-D Gaussian window, size x size.
torch::Tensor gaussian_window(int64_t size, double sigma);

// Windowed SSIM (11x11 Gaussian, sigma 1.5, K1 0.01, K2 0.03, range 1, valid
// windows, channel-averaged). Per image: B values.
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor ssim_loss(const torch::Tensor& a, const torch::Tensor& b);

inline constexpr double kPsnrCeiling = 100.0;

// 10 log10(1 / MSE) per image, clamped to kPsnrCeiling.
torch::Tensor psnr_per_image(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor psnr(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor psnr_loss(const torch::Tensor& a, const torch::Tensor& b);

// temperature * cosine(features, text rows): B x K.
torch::Tensor text_logits(const torch::Tensor& features, const torch::Tensor& text_table, double temperature);

// Cross-entropy of the cosine logits against (soft) labels B x K, batch mean.
torch::Tensor text_classification_loss(const torch::Tensor& features, const torch::Tensor& text_table,
                                       const torch::Tensor& labels, double temperature = 100.0);

// L^s + sum of weighted terms; the distillation term only when distill_on.
torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights, bool distill_on);

struct ImageScore {
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricSummary {
    std::vector<ImageScore> per_image;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

// Rounds to the nearest 8-bit level, as a PNG round trip would.
torch::Tensor quantize_8bit(const torch::Tensor& images);

// Scores B output/target pairs; quantize emulates comparison on saved 8-bit files.
MetricSummary evaluate_pairs(const torch::Tensor& outputs, const torch::Tensor& targets, bool quantize);
MetricSummary summarize(std::vector<ImageScore> scores);

} // namespace wxr
