#pragma once

#include "wxr/checkpoint.hpp"
#include "wxr/config.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wxr {

// lr * 0.5^floor(epoch / lr_halving_period)
double lr_schedule(int64_t epoch, const TrainConfig& cfg);

// Scalar values of one optimization step. total == smooth_l1 + sum of weighted terms.
struct LossBreakdown {
    int64_t epoch = 0;
    int64_t step = 0;
    double lr = 0.0;
    double smooth_l1 = 0.0;
    double perceptual = 0.0;
    double ssim = 0.0;
    double psnr = 0.0;
    double text = 0.0;
    double distill = 0.0;
    double total = 0.0;
    bool distill_on = false;

    std::string describe() const;
};

struct StepResult {
    LossTerms terms;
    torch::Tensor total;
    bool distill_on = false;
    ModelOutput output;
};

enum class EvalMode { Comparison, Ablation };

EvalMode eval_mode_from_string(const std::string& name);

struct EvalRow {
    std::string weather_path;
    std::string weather_class;
    double psnr = 0.0;
    double ssim = 0.0;
    double input_psnr = 0.0; // degraded input vs clean
    double input_ssim = 0.0;
    int64_t predicted_class = -1; // text-classification argmax, -1 without a prior
};

struct DatasetRow {
    std::string name;
    int64_t count = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double input_psnr = 0.0;
    double input_ssim = 0.0;
    double accuracy = 0.0; // text classification, NaN without a prior
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<DatasetRow> datasets; // one per weather class present, in class order
    DatasetRow overall;

    void write_csv(const std::filesystem::path& file) const;
    std::string table() const;
};

/// Owns the model, optimizer, teachers and loss extractors of one run.
///
/// Training is resumable at any batch boundary: batches are a pure function of
/// (seed, epoch, batch index) and the checkpoint stores the optimizer state.
class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    const TrainConfig& config() const { return cfg_; }
    RestorationModel& model() { return model_; }
    Teacher* prior_teacher() { return prior_teacher_.get(); }
    Teacher* distill_teacher() { return distill_teacher_.get(); }
    const torch::Tensor& text_table() const { return text_table_; }
    torch::optim::Adam& optimizer() { return *optimizer_; }

    int64_t epoch() const { return epoch_; }
    int64_t next_batch() const { return next_batch_; }
    int64_t global_step() const { return step_; }
    const std::vector<LossBreakdown>& history() const { return history_; }

    // Forward pass and every loss term, without an update.
    StepResult compute_terms(const Batch& batch, int64_t epoch);
    // One Adam update. Throws NumericError (with the term values) on a non-finite loss.
    LossBreakdown train_step(const Batch& batch, int64_t epoch);

    using StepCallback = std::function<void(const LossBreakdown&)>;
    // Runs from the current position up to (not including) epoch `until`
    // (default cfg.epochs). Writes loss_log.csv and checkpoints under out_dir
    // when write_files is set.
    void train(BatchLoader& loader, const StepCallback& on_step = {}, int64_t until = -1, bool write_files = true);

    Archive to_archive() const;
    void save(const std::filesystem::path& file) const;
    // Trainer restored from a checkpoint; the stored config is used as is.
    static Trainer load(const std::filesystem::path& file);

    // B x 3 x H x W (H, W multiples of the encoder stride) -> restored images, no grad.
    ModelOutput predict(const torch::Tensor& weather);
    // Any-size 3 x H x W image: edge-padded to the encoder stride, restored, cropped back.
    torch::Tensor restore(const torch::Tensor& image);
    // Argmax text class per image (-1 when the model has no prior).
    std::vector<int64_t> classify(const ModelOutput& out) const;

    // Comparison mode saves PNGs under out_dir/restored (or quantizes in memory
    // when out_dir is empty); ablation mode scores raw outputs.
    EvalReport evaluate(const Manifest& manifest, EvalMode mode, const std::filesystem::path& out_dir = {});

private:
    void build();
    void apply_lr(double lr);

    TrainConfig cfg_;
    RestorationModel model_{nullptr};
    std::unique_ptr<Teacher> prior_teacher_;
    std::unique_ptr<Teacher> distill_teacher_;
    std::unique_ptr<PerceptualExtractor> perceptual_;
    torch::Tensor text_table_;
    std::unique_ptr<torch::optim::Adam> optimizer_;
    int64_t epoch_ = 0;
    int64_t next_batch_ = 0;
    int64_t step_ = 0;
    std::vector<LossBreakdown> history_;
};

// Weights maps (one PNG per stage/block/kernel) and mean |residual| heatmaps
// (one per stage/block) for a single image.
void write_inspection(Trainer& trainer, const torch::Tensor& image, const std::filesystem::path& out_dir);

} // namespace wxr
