#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <utility>

namespace wxr {

struct CwpConfig {
    int64_t num_blocks = 3;
    int64_t heads = 8;
    int64_t prior_tokens = 48;
    int64_t ffn_expansion = 4;
};

struct PriorProjection {
    torch::Tensor class_features; // B x teacher_dim, compared against text embeddings
    torch::Tensor prior;          // B x C, the global prior fed to every CWP block
};

// Two trainable linear layers mapping a frozen global image embedding to the
// bottleneck width. The first layer's output stays in the teacher's embedding
// space and drives the text classification loss.
class PriorProjectorImpl : public torch::nn::Module {
public:
    PriorProjectorImpl(int64_t teacher_dim, int64_t out_dim);

    PriorProjection forward(const torch::Tensor& embedding);

    int64_t teacher_dim() const { return teacher_dim_; }

    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};

private:
    int64_t teacher_dim_;
};
TORCH_MODULE(PriorProjector);

// Learnable tokens (L x C) plus fusion weight times the global prior (B x C),
// broadcast over every token row. An undefined prior yields the tokens alone.
torch::Tensor fuse_prior_tokens(const torch::Tensor& learnable_tokens, const torch::Tensor& global_prior,
                                const torch::Tensor& fusion_weight, int64_t batch);

// Cross attention: queries from feature tokens, keys/values from the fused prior tokens.
class CwpCrossAttentionImpl : public torch::nn::Module {
public:
    CwpCrossAttentionImpl(int64_t dim, int64_t heads, int64_t prior_tokens);

    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& global_prior);
    // (K, V), each B x L_prior x C.
    std::pair<torch::Tensor, torch::Tensor> keys_values(const torch::Tensor& global_prior, int64_t batch);
    // B x heads x L x L_prior
    torch::Tensor attention_weights(const torch::Tensor& tokens, const torch::Tensor& global_prior);

    int64_t heads() const { return heads_; }

    torch::Tensor learnable_tokens;
    torch::Tensor fusion_weight;
    torch::nn::Linear query{nullptr};
    torch::nn::Linear key_value{nullptr};
    torch::nn::Linear proj{nullptr};

private:
    torch::Tensor attend(const torch::Tensor& tokens, const torch::Tensor& global_prior, torch::Tensor* weights);

    int64_t dim_;
    int64_t heads_;
};
TORCH_MODULE(CwpCrossAttention);

class CwpBlockImpl : public torch::nn::Module {
public:
    CwpBlockImpl(int64_t dim, int64_t heads, int64_t prior_tokens, int64_t expansion);

    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& global_prior);

    torch::nn::LayerNorm norm1{nullptr};
    CwpCrossAttention attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(CwpBlock);

class CwpModuleImpl : public torch::nn::Module {
public:
    CwpModuleImpl(int64_t dim, CwpConfig config);

    // bottleneck: B x C x H x W; global_prior: B x C or undefined.
    torch::Tensor forward(const torch::Tensor& bottleneck, const torch::Tensor& global_prior);

    // Pins every fusion weight at zero and stops its gradient (prior disabled).
    void freeze_fusion_weights();

    const CwpConfig& config() const { return config_; }

    torch::nn::ModuleList blocks{nullptr};

private:
    CwpConfig config_;
};
TORCH_MODULE(CwpModule);

} // namespace wxr
