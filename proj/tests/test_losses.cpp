#include "oracles.hpp"

#include "wxr/errors.hpp"
#include "wxr/losses.hpp"

#include <doctest.h>

using namespace wxr;
namespace F = torch::nn::functional;

namespace {

// 3x3 zero-padded convolution followed by ReLU, by loops.
torch::Tensor conv_relu(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& b, int64_t stride)
{
    auto xd = x.to(torch::kFloat64).contiguous();
    auto wd = w.to(torch::kFloat64).contiguous();
    auto bd = b.to(torch::kFloat64).contiguous();
    const auto B = xd.size(0), C = xd.size(1), H = xd.size(2), W = xd.size(3), O = wd.size(0);
    const auto oh = (H + 2 - 3) / stride + 1, ow = (W + 2 - 3) / stride + 1;
    auto out = torch::zeros({B, O, oh, ow}, torch::kFloat64);
    auto xa = xd.accessor<double, 4>();
    auto wa = wd.accessor<double, 4>();
    auto ba = bd.accessor<double, 1>();
    auto oa = out.accessor<double, 4>();
    for (int64_t n = 0; n < B; ++n)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < oh; ++i)
                for (int64_t j = 0; j < ow; ++j) {
                    double acc = ba[o];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t dy = 0; dy < 3; ++dy)
                            for (int64_t dx = 0; dx < 3; ++dx) {
                                const auto y = i * stride + dy - 1, xx = j * stride + dx - 1;
                                if (y >= 0 && xx >= 0 && y < H && xx < W)
                                    acc += wa[o][c][dy][dx] * xa[n][c][y][xx];
                            }
                    oa[n][o][i][j] = std::max(acc, 0.0);
                }
    return out;
}

} // namespace

TEST_SUITE("losses")
{
    TEST_CASE("smooth L1 branches")
    {
        auto x = torch::zeros({1, 3, 4, 4}, torch::kFloat64);
        CHECK(smooth_l1(x, x).item<double>() == 0.0);
        CHECK(smooth_l1(x + 0.5, x).item<double>() == doctest::Approx(0.125));
        CHECK(smooth_l1(x + 2.0, x).item<double>() == doctest::Approx(1.5));
        CHECK_THROWS_AS(smooth_l1(x, x.narrow(1, 0, 2)), ConfigError);
    }

    TEST_CASE("ssim")
    {
        auto x = torch::rand({2, 3, 24, 24}, torch::kFloat64);
        CHECK(ssim(x, x).item<double>() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(ssim_loss(x, x).item<double>() == doctest::Approx(0.0).epsilon(1e-12));

        // Constant images: variances and covariance vanish, leaving c1 / (1 + c1).
        const double c1 = 1e-4;
        auto zeros = torch::zeros({1, 3, 16, 16}, torch::kFloat64);
        CHECK(ssim(zeros, zeros + 1).item<double>() == doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-9));

        auto texture = torch::rand({1, 3, 48, 48}, torch::kFloat64);
        auto shifted = torch::roll(texture, {5}, {3});
        CHECK(ssim(texture, shifted).item<double>() < ssim(texture, texture).item<double>() - 0.1);
        auto window = gaussian_window(11, 1.5);
        CHECK(window.sum().item<double>() == doctest::Approx(1.0));
        CHECK(window[5][5].item<double>() == window.max().item<double>());
    }

    TEST_CASE("psnr")
    {
        auto zeros = torch::zeros({1, 3, 8, 8}, torch::kFloat64);
        CHECK(psnr(zeros, zeros + 1).item<double>() == doctest::Approx(0.0));
        CHECK(psnr_loss(zeros, zeros + 1).item<double>() == doctest::Approx(1.0));
        CHECK(psnr(zeros, zeros + 0.01).item<double>() == doctest::Approx(40.0));
        CHECK(psnr_loss(zeros, zeros + 0.01).item<double>() == doctest::Approx(0.6));
        CHECK(psnr(zeros, zeros).item<double>() == kPsnrCeiling);
        CHECK(psnr_loss(zeros, zeros).item<double>() == 0.0);
        CHECK(psnr_loss(zeros, zeros + 0.02).item<double>() > psnr_loss(zeros, zeros + 0.01).item<double>());
    }

    TEST_CASE("text classification")
    {
        auto table = torch::eye(3, torch::kFloat64);
        auto symmetric = torch::ones({1, 3}, torch::kFloat64);
        auto uniform = torch::full({1, 3}, 1.0 / 3.0, torch::kFloat64);
        CHECK(text_classification_loss(symmetric, table, uniform).item<double>() == doctest::Approx(std::log(3.0)));

        auto aligned = torch::tensor({{1.0, 0.0, 0.0}}, torch::kFloat64);
        auto one_hot = torch::tensor({{1.0, 0.0, 0.0}}, torch::kFloat64);
        CHECK(text_classification_loss(aligned, table, one_hot, 100.0).item<double>() < 1e-12);

        auto features = torch::randn({1, 5}, torch::kFloat64);
        auto text = torch::randn({3, 5}, torch::kFloat64);
        auto soft = torch::tensor({{0.75, 0.25, 0.0}}, torch::kFloat64);
        const double tau = 7.0;
        auto fa = features.accessor<double, 2>();
        auto ta = text.accessor<double, 2>();
        double fn = 0.0;
        for (int d = 0; d < 5; ++d)
            fn += fa[0][d] * fa[0][d];
        double logits[3];
        for (int k = 0; k < 3; ++k) {
            double dot = 0.0, tn = 0.0;
            for (int d = 0; d < 5; ++d) {
                dot += fa[0][d] * ta[k][d];
                tn += ta[k][d] * ta[k][d];
            }
            logits[k] = tau * dot / std::sqrt(fn * tn);
        }
        const double lse = std::log(std::exp(logits[0]) + std::exp(logits[1]) + std::exp(logits[2]));
        const double expected = -(0.75 * (logits[0] - lse) + 0.25 * (logits[1] - lse));
        CHECK(text_classification_loss(features, text, soft, tau).item<double>() ==
              doctest::Approx(expected).epsilon(1e-9));
        CHECK_THROWS_AS(text_classification_loss(features, torch::randn({3, 4}), soft), ConfigError);
        CHECK_THROWS_AS(text_classification_loss(features, text, torch::ones({1, 2})), ConfigError);
    }

    TEST_CASE("weighted total")
    {
        auto one = torch::tensor(1.0, torch::kFloat64);
        LossTerms terms{one, one, one, one, one, one};
        CHECK(total_loss(terms, LossWeights{}, true).item<double>() == doctest::Approx(1.34).epsilon(1e-12));
        auto zero = torch::tensor(0.0, torch::kFloat64);
        CHECK(total_loss(LossTerms{zero, zero, zero, zero, zero, zero}, LossWeights{}, true).item<double>() == 0.0);

        auto d = torch::tensor(2.5, torch::kFloat64);
        terms.distill = d;
        const double on = total_loss(terms, LossWeights{}, true).item<double>();
        const double off = total_loss(terms, LossWeights{}, false).item<double>();
        CHECK(on - off == doctest::Approx(0.1 * 2.5));
        CHECK_THROWS_AS(total_loss(LossTerms{}, LossWeights{}, true), ConfigError);
        LossWeights bad;
        bad.text = -1;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    TEST_CASE("perceptual loss on a two-layer stub")
    {
        std::vector<torch::Tensor> w = {torch::randn({4, 3, 3, 3}, torch::kFloat64),
                                        torch::randn({5, 4, 3, 3}, torch::kFloat64)};
        std::vector<torch::Tensor> b = {torch::randn({4}, torch::kFloat64), torch::randn({5}, torch::kFloat64)};
        StubPerceptualExtractor ex(w, b);
        auto x = torch::rand({2, 3, 8, 8}, torch::kFloat64);
        auto y = torch::rand({2, 3, 8, 8}, torch::kFloat64);

        auto x1 = conv_relu(x, w[0], b[0], 1), y1 = conv_relu(y, w[0], b[0], 1);
        auto x2 = conv_relu(x1, w[1], b[1], 2), y2 = conv_relu(y1, w[1], b[1], 2);
        const double expected = (x1 - y1).pow(2).mean().item<double>() + (x2 - y2).pow(2).mean().item<double>();
        CHECK(perceptual_loss(x, y, ex).item<double>() == doctest::Approx(expected).epsilon(1e-9));
        CHECK(perceptual_loss(x, x, ex).item<double>() == 0.0);

        StubPerceptualExtractor seeded(3);
        CHECK(seeded.features(x).size() == 3);
        CHECK(perceptual_loss(x, y, seeded).item<double>() >= 0.0);
        auto fallback = make_perceptual_extractor("/nonexistent/vgg.pt", 3);
        CHECK(fallback->name() == "stub");
    }

    TEST_CASE("loss gradients match finite differences")
    {
        auto target = torch::rand({1, 2, 4, 4}, torch::kFloat64);
        auto start = torch::rand({1, 2, 4, 4}, torch::kFloat64);
        auto shifted = (start * 0.5 + 0.25).contiguous();
        CHECK(oracle::gradcheck([&](const auto& in) { return smooth_l1(in[0], target); }, {start}) < 1e-5);
        CHECK(oracle::gradcheck([&](const auto& in) { return psnr_loss(in[0], target); }, {start}) < 1e-5);
        CHECK(oracle::gradcheck([&](const auto& in) { return ssim_loss(in[0], target); }, {shifted}) < 1e-5);
        StubPerceptualExtractor ex(5, {4, 4});
        auto rgb = torch::rand({1, 3, 4, 4}, torch::kFloat64);
        CHECK(oracle::gradcheck([&](const auto& in) { return perceptual_loss(in[0], rgb, ex); },
                                {torch::rand({1, 3, 4, 4}, torch::kFloat64)}) < 1e-4);
        auto table = torch::randn({3, 6}, torch::kFloat64);
        auto labels = torch::tensor({{0.75, 0.25, 0.0}, {0.0, 0.0, 1.0}}, torch::kFloat64);
        CHECK(oracle::gradcheck([&](const auto& in) { return text_classification_loss(in[0], table, labels, 10.0); },
                                {torch::randn({2, 6}, torch::kFloat64)}) < 1e-5);
    }

    TEST_CASE("evaluation metrics")
    {
        auto x = torch::rand({3, 3, 16, 16}, torch::kFloat64);
        auto same = evaluate_pairs(x, x, false);
        CHECK(same.mean_psnr == kPsnrCeiling);
        CHECK(same.mean_ssim == doctest::Approx(1.0));

        auto y = (x + 0.013 * torch::randn_like(x)).clamp(0, 1);
        auto raw = evaluate_pairs(y, x, false);
        auto quant = evaluate_pairs(y, x, true);
        CHECK(raw.mean_psnr != quant.mean_psnr);
        double p = 0.0, s = 0.0;
        for (const auto& sc : raw.per_image) {
            p += sc.psnr;
            s += sc.ssim;
        }
        CHECK(raw.per_image.size() == 3);
        CHECK(raw.mean_psnr == doctest::Approx(p / 3));
        CHECK(raw.mean_ssim == doctest::Approx(s / 3));
        CHECK(quantize_8bit(torch::tensor({0.5, 1.2, -0.1}, torch::kFloat64))
                  .equal(torch::tensor({128.0 / 255.0, 1.0, 0.0}, torch::kFloat64)));
    }
}
