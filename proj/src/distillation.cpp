#include "wxr/distillation.hpp"

#include "wxr/errors.hpp"
#include "wxr/teacher.hpp"

namespace wxr {

void DistillConfig::validate() const
{
    if (weight < 0.0)
        throw ConfigError("distill.weight must be >= 0");
    if (start_epoch < 0)
        throw ConfigError("distill.start_epoch must be >= 0");
    if (prefactor != "per_stage" && prefactor != "global")
        throw ConfigError("distill.prefactor must be 'per_stage' or 'global'");
    if (target != "residual" && target != "weather")
        throw ConfigError("distill.target must be 'residual' or 'weather'");
}

torch::Tensor standardize(const torch::Tensor& x, double eps)
{
    auto mean = x.mean({2, 3}, true);
    auto var = (x - mean).pow(2).mean({2, 3}, true);
    return (x - mean) / torch::sqrt(var + eps);
}

torch::Tensor residual_target(const torch::Tensor& teacher_clean, const torch::Tensor& teacher_weather, bool normalize)
{
    if (teacher_clean.sizes() != teacher_weather.sizes())
        throw ConfigError("residual_target: clean and weather teacher features differ in shape");
    auto diff = teacher_clean - teacher_weather;
    return normalize ? standardize(diff) : diff;
}

torch::Tensor stage_distill_loss(const std::vector<torch::Tensor>& student_residuals, const torch::Tensor& target,
                                 bool normalize)
{
    if (student_residuals.empty())
        throw ConfigError("stage_distill_loss: no student residuals");
    torch::Tensor total;
    for (const auto& r : student_residuals) {
        if (r.sizes() != target.sizes())
            throw ConfigError("stage_distill_loss: residual shape does not match target");
        auto term = ((normalize ? standardize(r) : r) - target).abs().mean();
        total = total.defined() ? total + term : term;
    }
    return total;
}

torch::Tensor total_distill_loss(const std::vector<torch::Tensor>& stage_losses,
                                 const std::vector<int64_t>& blocks_per_stage, const std::string& prefactor)
{
    if (stage_losses.empty() || stage_losses.size() != blocks_per_stage.size())
        throw ConfigError("total_distill_loss: need one block count per stage loss");
    const auto m = static_cast<double>(stage_losses.size());
    torch::Tensor sum;
    if (prefactor == "per_stage") {
        for (size_t j = 0; j < stage_losses.size(); ++j) {
            auto term = stage_losses[j] / static_cast<double>(blocks_per_stage[j]);
            sum = sum.defined() ? sum + term : term;
        }
        return sum / m;
    }
    if (prefactor == "global") {
        double mean_blocks = 0.0;
        for (size_t j = 0; j < stage_losses.size(); ++j) {
            sum = sum.defined() ? sum + stage_losses[j] : stage_losses[j];
            mean_blocks += static_cast<double>(blocks_per_stage[j]) / m;
        }
        return sum / (m * mean_blocks);
    }
    throw ConfigError("unknown distillation prefactor '" + prefactor + "'");
}

bool distill_active(int64_t epoch, const DistillConfig& config)
{
    return config.enabled && epoch >= config.start_epoch;
}

torch::Tensor distillation_loss(const std::vector<std::vector<torch::Tensor>>& residuals,
                                const std::vector<torch::Tensor>& teacher_clean,
                                const std::vector<torch::Tensor>& teacher_weather, const DistillConfig& config)
{
    if (residuals.size() != teacher_weather.size())
        throw ConfigError("distillation: " + std::to_string(residuals.size()) + " student stages vs " +
                          std::to_string(teacher_weather.size()) + " teacher stages");
    std::vector<torch::Tensor> stage_losses;
    std::vector<int64_t> counts;
    for (size_t j = 0; j < residuals.size(); ++j) {
        const auto& blocks = residuals[j];
        if (blocks.empty())
            throw ConfigError("distillation: stage " + std::to_string(j) + " has no residuals");
        const auto& ref = blocks.back();
        torch::Tensor target;
        if (config.target == "residual") {
            auto clean = resize_match(teacher_clean.at(j), ref.size(2), ref.size(3));
            auto weather = resize_match(teacher_weather[j], ref.size(2), ref.size(3));
            target = residual_target(clean, weather, config.normalize);
        } else {
            auto weather = resize_match(teacher_weather[j], ref.size(2), ref.size(3));
            target = config.normalize ? standardize(weather) : weather;
        }
        target = target.detach();
        std::vector<torch::Tensor> matched;
        const size_t first = config.match_all_blocks ? 0 : blocks.size() - 1;
        for (size_t i = first; i < blocks.size(); ++i)
            matched.push_back(channel_match(blocks[i], target.size(1)));
        stage_losses.push_back(stage_distill_loss(matched, target, config.normalize));
        counts.push_back(static_cast<int64_t>(matched.size()));
    }
    return total_distill_loss(stage_losses, counts, config.prefactor);
}

} // namespace wxr
