#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace wxr {

struct DistillConfig {
    bool enabled = true;
    int64_t start_epoch = 200;
    double weight = 0.1;
    // false matches only the last block of each stage.
    bool match_all_blocks = true;
    bool normalize = true;
    // "per_stage": 1/m * sum_j L_j / N_j.  "global": 1/(m * mean_j N_j) * sum_j L_j.
    std::string prefactor = "per_stage";
    // "residual": teacher(clean) - teacher(weather).  "weather": teacher(weather) alone.
    std::string target = "residual";

    void validate() const;
};

// Per-channel spatial standardization, (x - mean) / sqrt(var + eps), B x C x H x W.
torch::Tensor standardize(const torch::Tensor& x, double eps = 1e-6);

// norm(clean - weather), or the raw difference when normalize is false.
torch::Tensor residual_target(const torch::Tensor& teacher_clean, const torch::Tensor& teacher_weather,
                              bool normalize = true);

// Sum over residuals of mean |norm(residual) - target|. Residuals must already match the target shape.
torch::Tensor stage_distill_loss(const std::vector<torch::Tensor>& student_residuals, const torch::Tensor& target,
                                 bool normalize = true);

// Combines stage losses with the configured prefactor. blocks_per_stage[j] is the
// number of residual terms summed into stage_losses[j].
torch::Tensor total_distill_loss(const std::vector<torch::Tensor>& stage_losses,
                                 const std::vector<int64_t>& blocks_per_stage,
                                 const std::string& prefactor = "per_stage");

bool distill_active(int64_t epoch, const DistillConfig& config);

// Full loss from encoder residuals ([stage][block]) and teacher stage features
// on the clean and weather images. Student residuals are channel-pooled to the
// teacher width; teacher targets are resized to the student resolution.
torch::Tensor distillation_loss(const std::vector<std::vector<torch::Tensor>>& residuals,
                                const std::vector<torch::Tensor>& teacher_clean,
                                const std::vector<torch::Tensor>& teacher_weather, const DistillConfig& config);

} // namespace wxr
