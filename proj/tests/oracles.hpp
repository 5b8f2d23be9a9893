#pragma once

// Independent reference implementations written with explicit loops.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// Builds k(x, y) = sum_j w_j(x, y) * bank_j at every pixel and applies it to the
// zero-padded 3x3 window.
inline torch::Tensor sar_per_pixel(const torch::Tensor& features, const torch::Tensor& bank,
                                   const torch::Tensor& weights)
{
    auto f = features.to(torch::kFloat64).contiguous();
    auto k = bank.to(torch::kFloat64).contiguous();
    auto w = weights.to(torch::kFloat64).contiguous();
    const auto B = f.size(0), C = f.size(1), H = f.size(2), W = f.size(3), N = k.size(0);
    auto out = torch::zeros({B, C, H, W}, torch::kFloat64);
    auto fa = f.accessor<double, 4>();
    auto ka = k.accessor<double, 4>();
    auto wa = w.accessor<double, 4>();
    auto oa = out.accessor<double, 4>();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double mixed[3][3] = {};
                    for (int64_t j = 0; j < N; ++j)
                        for (int dy = 0; dy < 3; ++dy)
                            for (int dx = 0; dx < 3; ++dx)
                                mixed[dy][dx] += wa[b][j][y][x] * ka[j][c][dy][dx];
                    double acc = 0.0;
                    for (int dy = 0; dy < 3; ++dy)
                        for (int dx = 0; dx < 3; ++dx) {
                            const auto yy = y + dy - 1;
                            const auto xx = x + dx - 1;
                            if (yy < 0 || xx < 0 || yy >= H || xx >= W)
                                continue;
                            acc += mixed[dy][dx] * fa[b][c][yy][xx];
                        }
                    oa[b][c][y][x] = acc;
                }
    return out;
}

// softmax(q k^T * scale) v for single-head L x D inputs, by loops.
inline torch::Tensor dense_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                     double scale)
{
    auto qd = q.to(torch::kFloat64).contiguous();
    auto kd = k.to(torch::kFloat64).contiguous();
    auto vd = v.to(torch::kFloat64).contiguous();
    const auto L = qd.size(0), M = kd.size(0), D = qd.size(1), E = vd.size(1);
    auto out = torch::zeros({L, E}, torch::kFloat64);
    auto qa = qd.accessor<double, 2>();
    auto ka = kd.accessor<double, 2>();
    auto va = vd.accessor<double, 2>();
    auto oa = out.accessor<double, 2>();
    for (int64_t i = 0; i < L; ++i) {
        std::vector<double> s(static_cast<size_t>(M));
        double mx = -1e300;
        for (int64_t j = 0; j < M; ++j) {
            double dot = 0.0;
            for (int64_t d = 0; d < D; ++d)
                dot += qa[i][d] * ka[j][d];
            s[static_cast<size_t>(j)] = dot * scale;
            mx = std::max(mx, s[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        for (auto& e : s) {
            e = std::exp(e - mx);
            z += e;
        }
        for (int64_t j = 0; j < M; ++j)
            for (int64_t e = 0; e < E; ++e)
                oa[i][e] += s[static_cast<size_t>(j)] / z * va[j][e];
    }
    return out;
}

// y = x W^T + b by loops (x: L x In, W: Out x In).
inline torch::Tensor linear(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias)
{
    auto xd = x.to(torch::kFloat64).contiguous();
    auto wd = weight.to(torch::kFloat64).contiguous();
    auto bd = bias.to(torch::kFloat64).contiguous();
    const auto L = xd.size(0), In = xd.size(1), Out = wd.size(0);
    auto out = torch::zeros({L, Out}, torch::kFloat64);
    auto xa = xd.accessor<double, 2>();
    auto wa = wd.accessor<double, 2>();
    auto ba = bd.accessor<double, 1>();
    auto oa = out.accessor<double, 2>();
    for (int64_t i = 0; i < L; ++i)
        for (int64_t o = 0; o < Out; ++o) {
            double acc = ba[o];
            for (int64_t k = 0; k < In; ++k)
                acc += xa[i][k] * wa[o][k];
            oa[i][o] = acc;
        }
    return out;
}

inline double clip01(double v)
{
    return std::min(1.0, std::max(0.0, v));
}

// Element-wise compositing loops over 3 x H x W images and H x W maps.
inline torch::Tensor raindrop(const torch::Tensor& clean, const torch::Tensor& mask, const torch::Tensor& residual)
{
    auto I = clean.to(torch::kFloat64).contiguous();
    auto M = mask.to(torch::kFloat64).contiguous();
    auto R = residual.to(torch::kFloat64).contiguous();
    auto out = torch::empty_like(I);
    auto ia = I.accessor<double, 3>();
    auto ma = M.accessor<double, 2>();
    auto ra = R.accessor<double, 3>();
    auto oa = out.accessor<double, 3>();
    for (int64_t c = 0; c < I.size(0); ++c)
        for (int64_t y = 0; y < I.size(1); ++y)
            for (int64_t x = 0; x < I.size(2); ++x)
                oa[c][y][x] = clip01((1.0 - ma[y][x]) * ia[c][y][x] + ra[c][y][x]);
    return out;
}

inline torch::Tensor heavyrain(const torch::Tensor& clean, const torch::Tensor& transmission,
                               const std::vector<torch::Tensor>& streaks, const std::vector<double>& light)
{
    auto I = clean.to(torch::kFloat64).contiguous();
    auto T = transmission.to(torch::kFloat64).contiguous();
    std::vector<torch::Tensor> S;
    for (const auto& s : streaks)
        S.push_back(s.to(torch::kFloat64).contiguous());
    auto out = torch::empty_like(I);
    auto ia = I.accessor<double, 3>();
    auto ta = T.accessor<double, 2>();
    auto oa = out.accessor<double, 3>();
    for (int64_t c = 0; c < I.size(0); ++c) {
        const double a = light.size() == 1 ? light[0] : light[static_cast<size_t>(c)];
        for (int64_t y = 0; y < I.size(1); ++y)
            for (int64_t x = 0; x < I.size(2); ++x) {
                double sum = ia[c][y][x];
                for (const auto& s : S)
                    sum += s.accessor<double, 3>()[c][y][x];
                oa[c][y][x] = clip01(ta[y][x] * sum + (1.0 - ta[y][x]) * a);
            }
    }
    return out;
}

inline torch::Tensor snow(const torch::Tensor& clean, const torch::Tensor& mask, const torch::Tensor& flakes)
{
    auto I = clean.to(torch::kFloat64).contiguous();
    auto M = mask.to(torch::kFloat64).contiguous();
    auto S = flakes.to(torch::kFloat64).contiguous();
    auto out = torch::empty_like(I);
    auto ia = I.accessor<double, 3>();
    auto ma = M.accessor<double, 2>();
    auto sa = S.accessor<double, 3>();
    auto oa = out.accessor<double, 3>();
    for (int64_t c = 0; c < I.size(0); ++c)
        for (int64_t y = 0; y < I.size(1); ++y)
            for (int64_t x = 0; x < I.size(2); ++x)
                oa[c][y][x] = clip01((1.0 - ma[y][x]) * ia[c][y][x] + ma[y][x] * sa[c][y][x]);
    return out;
}

// Central finite differences of a scalar function against autograd, for
// every input. Inputs must be double leaf tensors. Returns the largest
// relative error ||g_analytic - g_numeric|| / max(||g_numeric||, tiny).
inline double gradcheck(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& fn,
                        std::vector<torch::Tensor> inputs, double step = 1e-6)
{
    for (auto& t : inputs)
        t = t.detach().clone().to(torch::kFloat64).set_requires_grad(true);
    auto value = fn(inputs);
    auto analytic = torch::autograd::grad({value}, inputs, {}, false, false, true);

    double worst = 0.0;
    torch::NoGradGuard guard;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto flat = inputs[i].view({-1});
        auto numeric = torch::zeros_like(flat);
        for (int64_t k = 0; k < flat.numel(); ++k) {
            const double orig = flat[k].item<double>();
            flat[k] = orig + step;
            const double up = fn(inputs).item<double>();
            flat[k] = orig - step;
            const double down = fn(inputs).item<double>();
            flat[k] = orig;
            numeric[k] = (up - down) / (2.0 * step);
        }
        auto a = analytic[i].defined() ? analytic[i].reshape({-1}) : torch::zeros_like(numeric);
        const double denom = std::max(numeric.norm().item<double>(), 1e-12);
        worst = std::max(worst, (a - numeric).norm().item<double>() / denom);
    }
    return worst;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b)
{
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline double rel_err(const torch::Tensor& a, const torch::Tensor& b)
{
    auto d = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
    auto s = b.to(torch::kFloat64).abs().max().item<double>();
    return d / std::max(s, 1e-12);
}

} // namespace oracle
