#include "wxr/losses.hpp"

#include "wxr/errors.hpp"

#include <torch/script.h>

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <iostream>

namespace F = torch::nn::functional;

namespace wxr {

void LossWeights::validate() const
{
    if (perceptual < 0 || ssim < 0 || psnr < 0 || text < 0 || distill < 0)
        throw ConfigError("loss weights must be non-negative");
}

namespace {

torch::Tensor as_batch(const torch::Tensor& x)
{
    return x.dim() == 3 ? x.unsqueeze(0) : x;
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what)
{
    if (a.sizes() != b.sizes())
        throw ConfigError(std::string(what) + ": image shapes differ");
    if (a.dim() != 3 && a.dim() != 4)
        throw ConfigError(std::string(what) + ": expected C x H x W or B x C x H x W");
}

} // namespace

torch::Tensor smooth_l1(const torch::Tensor& output, const torch::Tensor& target, double beta)
{
    check_pair(output, target, "smooth_l1");
    return F::smooth_l1_loss(output, target, F::SmoothL1LossFuncOptions().beta(beta));
}

// ---------------------------------------------------------------------------

StubPerceptualExtractor::StubPerceptualExtractor(uint64_t seed, std::vector<int64_t> channels)
{
    auto gen = at::detail::createCPUGenerator(seed);
    int64_t in = 3;
    for (auto out : channels) {
        weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) *
                           std::sqrt(2.0 / static_cast<double>(in * 9)));
        biases_.push_back(torch::zeros({out}));
        in = out;
    }
}

StubPerceptualExtractor::StubPerceptualExtractor(std::vector<torch::Tensor> weights, std::vector<torch::Tensor> biases)
    : weights_(std::move(weights)), biases_(std::move(biases))
{
    if (weights_.size() != biases_.size() || weights_.empty())
        throw ConfigError("perceptual stub: need one bias per weight");
}

std::vector<torch::Tensor> StubPerceptualExtractor::features(const torch::Tensor& images)
{
    std::vector<torch::Tensor> out;
    auto h = as_batch(images);
    for (size_t i = 0; i < weights_.size(); ++i) {
        auto w = weights_[i].to(h.dtype());
        auto b = biases_[i].to(h.dtype());
        h = torch::relu(F::conv2d(h, w, F::Conv2dFuncOptions().bias(b).stride(i == 0 ? 1 : 2).padding(1)));
        out.push_back(h);
    }
    return out;
}

struct TorchScriptPerceptualExtractor::Impl {
    torch::jit::script::Module module;
    std::string name;
};

TorchScriptPerceptualExtractor::TorchScriptPerceptualExtractor(const std::filesystem::path& file)
    : impl_(std::make_unique<Impl>())
{
    try {
        impl_->module = torch::jit::load(file.string());
    } catch (const c10::Error& e) {
        throw TeacherLoadError("failed to load perceptual extractor " + file.string() + ": " +
                               e.what_without_backtrace());
    }
    impl_->module.eval();
    for (auto p : impl_->module.parameters())
        p.set_requires_grad(false);
    impl_->name = file.stem().string();
}

TorchScriptPerceptualExtractor::~TorchScriptPerceptualExtractor() = default;

std::vector<torch::Tensor> TorchScriptPerceptualExtractor::features(const torch::Tensor& images)
{
    auto result = impl_->module.forward({as_batch(images).to(torch::kFloat32)});
    std::vector<torch::Tensor> out;
    for (const auto& t : result.toTensorList())
        out.push_back(t);
    return out;
}

std::string TorchScriptPerceptualExtractor::name() const
{
    return impl_->name;
}

std::unique_ptr<PerceptualExtractor> make_perceptual_extractor(const std::string& file, uint64_t seed)
{
    if (!file.empty()) {
        if (std::filesystem::exists(file))
            return std::make_unique<TorchScriptPerceptualExtractor>(file);
        std::cerr << "warning: perceptual extractor '" << file << "' not found, using the stub extractor\n";
    }
    return std::make_unique<StubPerceptualExtractor>(seed);
}

torch::Tensor perceptual_loss(const torch::Tensor& output, const torch::Tensor& target, PerceptualExtractor& extractor)
{
    check_pair(output, target, "perceptual_loss");
    auto fo = extractor.features(output);
    std::vector<torch::Tensor> ft;
    {
        torch::NoGradGuard guard;
        ft = extractor.features(target);
    }
    torch::Tensor total;
    for (size_t i = 0; i < fo.size(); ++i) {
        auto term = F::mse_loss(fo[i], ft[i].detach());
        total = total.defined() ? total + term : term;
    }
    return total;
}

// ---------------------------------------------------------------------------

torch::Tensor gaussian_window(int64_t size, double sigma)
{
    auto coords = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
    auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

torch::Tensor ssim_per_image(const torch::Tensor& a_in, const torch::Tensor& b_in)
{
    check_pair(a_in, b_in, "ssim");
    auto a = as_batch(a_in);
    auto b = as_batch(b_in);
    constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
    constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
    const auto channels = a.size(1);
    int64_t size = std::min<int64_t>({11, a.size(2), a.size(3)});
    if (size % 2 == 0)
        --size;
    auto window = gaussian_window(size, 1.5).to(a.dtype()).view({1, 1, size, size}).repeat({channels, 1, 1, 1});
    auto filt = [&](const torch::Tensor& x) {
        return F::conv2d(x, window, F::Conv2dFuncOptions().groups(channels));
    };
    auto mu_a = filt(a);
    auto mu_b = filt(b);
    auto mu_aa = mu_a * mu_a;
    auto mu_bb = mu_b * mu_b;
    auto mu_ab = mu_a * mu_b;
    auto var_a = filt(a * a) - mu_aa;
    auto var_b = filt(b * b) - mu_bb;
    auto cov = filt(a * b) - mu_ab;
    auto map = ((2.0 * mu_ab + c1) * (2.0 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2));
    return map.mean({1, 2, 3});
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b)
{
    return ssim_per_image(a, b).mean();
}

torch::Tensor ssim_loss(const torch::Tensor& a, const torch::Tensor& b)
{
    return 1.0 - ssim(a, b);
}

torch::Tensor psnr_per_image(const torch::Tensor& a_in, const torch::Tensor& b_in)
{
    check_pair(a_in, b_in, "psnr");
    auto a = as_batch(a_in);
    auto b = as_batch(b_in);
    auto mse = (a - b).pow(2).mean({1, 2, 3});
    // 10 log10(1/mse) >= ceiling  <=>  mse <= 10^(-ceiling/10)
    auto floor = std::pow(10.0, -kPsnrCeiling / 10.0);
    auto value = -10.0 * torch::log10(mse.clamp_min(floor));
    return value.clamp_max(kPsnrCeiling);
}

torch::Tensor psnr(const torch::Tensor& a, const torch::Tensor& b)
{
    return psnr_per_image(a, b).mean();
}

torch::Tensor psnr_loss(const torch::Tensor& a, const torch::Tensor& b)
{
    return 1.0 - psnr(a, b) / kPsnrCeiling;
}

// ---------------------------------------------------------------------------

torch::Tensor text_logits(const torch::Tensor& features, const torch::Tensor& text_table, double temperature)
{
    if (features.dim() != 2 || text_table.dim() != 2 || features.size(1) != text_table.size(1))
        throw ConfigError("text logits: feature dim " + std::to_string(features.size(-1)) +
                          " does not match text embedding dim " + std::to_string(text_table.size(-1)));
    auto f = F::normalize(features, F::NormalizeFuncOptions().dim(1).eps(1e-12));
    auto t = F::normalize(text_table.to(features.dtype()), F::NormalizeFuncOptions().dim(1).eps(1e-12));
    return temperature * torch::matmul(f, t.t());
}

torch::Tensor text_classification_loss(const torch::Tensor& features, const torch::Tensor& text_table,
                                       const torch::Tensor& labels, double temperature)
{
    auto logits = text_logits(features, text_table, temperature);
    if (labels.sizes() != logits.sizes())
        throw ConfigError("text classification: labels must be B x K matching the prompt set");
    return -(labels.to(logits.dtype()) * torch::log_softmax(logits, 1)).sum(1).mean();
}

torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights, bool distill_on)
{
    if (!terms.smooth_l1.defined())
        throw ConfigError("total_loss: smooth L1 term is required");
    auto total = terms.smooth_l1;
    auto add = [&](const torch::Tensor& term, double w) {
        if (term.defined() && w != 0.0)
            total = total + w * term;
    };
    add(terms.perceptual, weights.perceptual);
    add(terms.ssim, weights.ssim);
    add(terms.psnr, weights.psnr);
    add(terms.text, weights.text);
    if (distill_on)
        add(terms.distill, weights.distill);
    return total;
}

// ---------------------------------------------------------------------------

torch::Tensor quantize_8bit(const torch::Tensor& images)
{
    return torch::round(images.clamp(0.0, 1.0) * 255.0) / 255.0;
}

MetricSummary summarize(std::vector<ImageScore> scores)
{
    MetricSummary s;
    s.per_image = std::move(scores);
    for (const auto& sc : s.per_image) {
        s.mean_psnr += sc.psnr;
        s.mean_ssim += sc.ssim;
    }
    if (!s.per_image.empty()) {
        s.mean_psnr /= static_cast<double>(s.per_image.size());
        s.mean_ssim /= static_cast<double>(s.per_image.size());
    }
    return s;
}

MetricSummary evaluate_pairs(const torch::Tensor& outputs, const torch::Tensor& targets, bool quantize)
{
    torch::NoGradGuard guard;
    auto o = as_batch(outputs).to(torch::kFloat64);
    auto t = as_batch(targets).to(torch::kFloat64);
    if (quantize) {
        o = quantize_8bit(o);
        t = quantize_8bit(t);
    }
    auto p = psnr_per_image(o, t);
    auto s = ssim_per_image(o, t);
    std::vector<ImageScore> scores;
    for (int64_t i = 0; i < o.size(0); ++i)
        scores.push_back({p[i].item<double>(), s[i].item<double>()});
    return summarize(std::move(scores));
}

} // namespace wxr
