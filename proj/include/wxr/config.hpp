#pragma once

#include "wxr/data_pipeline.hpp"
#include "wxr/distillation.hpp"
#include "wxr/losses.hpp"
#include "wxr/model.hpp"
#include "wxr/teacher.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wxr {

struct TrainConfig {
    std::string profile = "paper";
    uint64_t seed = 0;
    std::string device = "cpu";
    int64_t threads = 1;

    ModelConfig model;
    TeacherOptions prior_teacher;
    TeacherOptions distill_teacher;

    LossWeights weights;
    double smooth_l1_beta = 1.0;
    double temperature = 100.0;
    std::string perceptual_extractor; // TorchScript file; empty selects the stub
    DistillConfig distill;
    AugmentConfig augment;

    int64_t epochs = 250;
    int64_t batch_size = 32;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int64_t lr_halving_period = 100;

    int64_t checkpoint_every = 10; // epochs; the last epoch is always saved
    int64_t eval_every = 0;        // epochs; 0 disables in-training evaluation
    std::string train_manifest;
    std::string eval_manifest;
    std::string out_dir = "runs/default";

    void validate() const;
};

// "paper" (the defaults above) or "desk" (small model and crops for CPU runs).
TrainConfig profile_config(const std::string& profile);

nlohmann::json to_json(const TrainConfig& cfg);

// Starts from the profile named in `overrides` (key "profile", default "paper")
// and applies every key. Unknown keys throw ConfigError listing the valid keys
// at that level.
TrainConfig config_from_json(const nlohmann::json& overrides);

// Reads a JSON config file (may be partial).
nlohmann::json read_config_file(const std::filesystem::path& file);

// Applies "a.b.c=value" to a JSON tree. value is parsed as JSON when possible,
// otherwise taken as a string.
void apply_override(nlohmann::json& tree, const std::string& assignment);

// Config file plus --set overrides, validated.
TrainConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

// Hex digest of the canonical JSON form.
std::string config_digest(const TrainConfig& cfg);

} // namespace wxr
