#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "lsms/config.hpp"
#include "lsms/metrics.hpp"
#include "lsms/model.hpp"
#include "lsms/synthetic.hpp"

namespace lsms {

struct TrainConfig {
    double lr = 3e-5;
    double weight_decay = 0.01;
    double poly_power = 0.9;
    int epochs = 100;
    int batch_size = 16;
    int image_size = 480;
    std::uint64_t seed = 0;
    double lambda_bce = 1.0;
    double lambda_dice = 1.0;
    double text_fraction = 1.0;
    // Draws a per-sample text fraction from {0.25, 0.5, 1.0} during training.
    bool fraction_augment = false;
    // Random horizontal/vertical flips with position words rewritten to match.
    bool flip_augment = false;
    double val_fraction = 0.1;
    // Stop after this many epochs of the schedule (0 = run all). The schedule
    // length stays `epochs`, so a stopped run can be resumed exactly.
    int stop_after = 0;

    void validate() const;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);
void apply_key_values(TrainConfig &cfg, const KeyValues &kv, std::vector<std::string> *unused = nullptr);

// lr0 * (1 - step / total)^power, clamped to 0 at and after `total`.
double poly_lr(double lr0, std::int64_t step, std::int64_t total, double power);

// lambda_bce * mean BCE(logits, gt) + lambda_dice * (1 - soft Dice), the soft
// Dice computed per sample over probabilities and averaged. Throws
// ShapeMismatch.
torch::Tensor segmentation_loss(const torch::Tensor &logits, const torch::Tensor &gt, double lambda_bce = 1.0,
                                double lambda_dice = 1.0);

// Samples converted to model-ready tensors (resized when needed).
struct TensorSet {
    torch::Tensor images;  // [N, 3, H, W] float
    torch::Tensor masks;   // [N, 1, H, W] float 0/1
    std::vector<std::string> expressions;
    std::vector<std::string> ids;
};

TensorSet to_tensors(const std::vector<ReferringSample> &samples, int height, int width);

struct EpochRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double val_dice = 0.0;
    double val_miou = 0.0;
    double seconds = 0.0;
};

void to_json(nlohmann::json &j, const EpochRecord &r);
void from_json(const nlohmann::json &j, EpochRecord &r);

struct TrainResult {
    std::vector<EpochRecord> history;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    double best_val_dice = -1.0;
};

struct TrainOptions {
    std::filesystem::path out_dir;
    // Continue from a "last" checkpoint written by an earlier run.
    std::optional<std::filesystem::path> resume;
    bool verbose = true;
};

/// Trains from scratch (or resumes) with AdamW and the polynomial schedule.
/// Writes best.pt, last.pt and an append-only train_log.jsonl in out_dir.
/// Throws NonFiniteLoss after dumping the offending batch to
/// out_dir/nonfinite_batch.json.
TrainResult train(const ModelConfig &model_cfg, const TrainConfig &train_cfg, const std::vector<ReferringSample> &train_set,
                  const std::vector<ReferringSample> &val_set, const TrainOptions &options);

struct EvalOptions {
    double text_fraction = 1.0;
    // Replaces every expression (text-ablation runs).
    std::optional<std::string> expression_override;
    bool disambiguation_only = false;
    double threshold = 0.5;
    int batch_size = 16;
    std::string split = "val";
    std::string checkpoint_id;
};

// Binary predictions [N, H, W] at the model's input size.
torch::Tensor predict(LsmsModel &model, const torch::Tensor &images, const std::vector<std::string> &expressions,
                      double threshold = 0.5, int batch_size = 16);

MetricsReport evaluate(LsmsModel &model, const std::vector<ReferringSample> &samples, const EvalOptions &options);

// Scores given predictions against the samples' masks (same order).
MetricsReport evaluate_predictions(const std::vector<torch::Tensor> &predictions,
                                   const std::vector<ReferringSample> &samples);

}  // namespace lsms
