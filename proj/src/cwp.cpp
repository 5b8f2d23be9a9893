#include "wxr/cwp.hpp"

#include "wxr/errors.hpp"
#include "wxr/sar_encoder.hpp"

#include <cmath>
#include <string>

namespace wxr {

PriorProjectorImpl::PriorProjectorImpl(int64_t teacher_dim, int64_t out_dim) : teacher_dim_(teacher_dim)
{
    fc1 = register_module("fc1", torch::nn::Linear(teacher_dim, teacher_dim));
    fc2 = register_module("fc2", torch::nn::Linear(teacher_dim, out_dim));
}

PriorProjection PriorProjectorImpl::forward(const torch::Tensor& embedding)
{
    if (embedding.size(-1) != teacher_dim_)
        throw ConfigError("prior projector expects embedding dim " + std::to_string(teacher_dim_) + ", got " +
                          std::to_string(embedding.size(-1)));
    PriorProjection out;
    out.class_features = fc1(embedding);
    out.prior = fc2(torch::gelu(out.class_features));
    return out;
}

// ---------------------------------------------------------------------------

torch::Tensor fuse_prior_tokens(const torch::Tensor& learnable_tokens, const torch::Tensor& global_prior,
                                const torch::Tensor& fusion_weight, int64_t batch)
{
    auto tokens = learnable_tokens.unsqueeze(0).expand({batch, -1, -1});
    if (!global_prior.defined())
        return tokens;
    if (global_prior.dim() != 2 || global_prior.size(0) != batch || global_prior.size(1) != learnable_tokens.size(1))
        throw ConfigError("global prior must be " + std::to_string(batch) + " x " +
                          std::to_string(learnable_tokens.size(1)));
    return tokens + fusion_weight * global_prior.unsqueeze(1);
}

CwpCrossAttentionImpl::CwpCrossAttentionImpl(int64_t dim, int64_t heads, int64_t prior_tokens)
    : dim_(dim), heads_(heads)
{
    if (heads < 1 || dim % heads != 0)
        throw ConfigError("cwp attention: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    if (prior_tokens < 1)
        throw ConfigError("cwp attention: prior_tokens must be >= 1");
    learnable_tokens = register_parameter("learnable_tokens", torch::randn({prior_tokens, dim}) * 0.02);
    fusion_weight = register_parameter("fusion_weight", torch::zeros({}));
    query = register_module("query", torch::nn::Linear(dim, dim));
    key_value = register_module("key_value", torch::nn::Linear(dim, 2 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
}

std::pair<torch::Tensor, torch::Tensor> CwpCrossAttentionImpl::keys_values(const torch::Tensor& global_prior,
                                                                           int64_t batch)
{
    auto kv = key_value(fuse_prior_tokens(learnable_tokens, global_prior, fusion_weight, batch));
    auto parts = kv.chunk(2, -1);
    return {parts[0], parts[1]};
}

torch::Tensor CwpCrossAttentionImpl::attend(const torch::Tensor& tokens, const torch::Tensor& global_prior,
                                            torch::Tensor* weights)
{
    if (tokens.dim() != 3 || tokens.size(2) != dim_)
        throw ConfigError("cwp attention expects B x L x " + std::to_string(dim_) + " tokens");
    const auto batch = tokens.size(0);
    const auto len = tokens.size(1);
    const auto head_dim = dim_ / heads_;
    auto [k, v] = keys_values(global_prior, batch);
    const auto prior_len = k.size(1);

    auto q = query(tokens).view({batch, len, heads_, head_dim}).transpose(1, 2);
    k = k.reshape({batch, prior_len, heads_, head_dim}).transpose(1, 2);
    v = v.reshape({batch, prior_len, heads_, head_dim}).transpose(1, 2);

    auto probs = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
    if (weights)
        *weights = probs;
    return proj(torch::matmul(probs, v).transpose(1, 2).reshape({batch, len, dim_}));
}

torch::Tensor CwpCrossAttentionImpl::forward(const torch::Tensor& tokens, const torch::Tensor& global_prior)
{
    return attend(tokens, global_prior, nullptr);
}

torch::Tensor CwpCrossAttentionImpl::attention_weights(const torch::Tensor& tokens, const torch::Tensor& global_prior)
{
    torch::Tensor w;
    attend(tokens, global_prior, &w);
    return w;
}

// ---------------------------------------------------------------------------

CwpBlockImpl::CwpBlockImpl(int64_t dim, int64_t heads, int64_t prior_tokens, int64_t expansion)
{
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", CwpCrossAttention(dim, heads, prior_tokens));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * expansion));
    fc2 = register_module("fc2", torch::nn::Linear(dim * expansion, dim));
}

torch::Tensor CwpBlockImpl::forward(const torch::Tensor& tokens, const torch::Tensor& global_prior)
{
    auto x = tokens + attn(norm1(tokens), global_prior);
    return x + fc2(torch::gelu(fc1(norm2(x))));
}

// ---------------------------------------------------------------------------

CwpModuleImpl::CwpModuleImpl(int64_t dim, CwpConfig config) : config_(config)
{
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < config_.num_blocks; ++i)
        blocks->push_back(CwpBlock(dim, config_.heads, config_.prior_tokens, config_.ffn_expansion));
}

torch::Tensor CwpModuleImpl::forward(const torch::Tensor& bottleneck, const torch::Tensor& global_prior)
{
    if (bottleneck.dim() != 4)
        throw ConfigError("cwp module expects a B x C x H x W bottleneck");
    const auto height = bottleneck.size(2);
    const auto width = bottleneck.size(3);
    auto tokens = map_to_tokens(bottleneck);
    for (const auto& block : *blocks)
        tokens = block->as<CwpBlockImpl>()->forward(tokens, global_prior);
    return tokens_to_map(tokens, height, width);
}

void CwpModuleImpl::freeze_fusion_weights()
{
    torch::NoGradGuard guard;
    for (const auto& block : *blocks) {
        auto& w = block->as<CwpBlockImpl>()->attn->fusion_weight;
        w.zero_();
        w.set_requires_grad(false);
    }
}

} // namespace wxr
