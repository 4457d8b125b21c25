#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace lsms {

struct MaskCounts {
    std::int64_t pred = 0;
    std::int64_t gt = 0;
    std::int64_t intersection = 0;

    std::int64_t union_size() const { return pred + gt - intersection; }
};

// Counts over boolean-like masks of identical shape. Throws ShapeMismatch.
MaskCounts count_overlap(const torch::Tensor &pred, const torch::Tensor &gt);

// 2|P∩G| / (|P| + |G|). When both masks are empty the result is
// `both_empty_value` (1.0 by default).
double dice(const torch::Tensor &pred, const torch::Tensor &gt, double both_empty_value = 1.0);
double dice(const MaskCounts &c, double both_empty_value = 1.0);

double iou(const torch::Tensor &pred, const torch::Tensor &gt, double both_empty_value = 1.0);
double iou(const MaskCounts &c, double both_empty_value = 1.0);

// Per-instance mean IoU. Throws EmptyEvaluation for an empty list.
double miou(const std::vector<std::pair<torch::Tensor, torch::Tensor>> &pairs, double both_empty_value = 1.0);

struct SampleScore {
    std::string id;
    double dice = 0.0;
    double iou = 0.0;
};

struct MetricsReport {
    double dice_mean = 0.0;
    double miou_mean = 0.0;
    std::vector<SampleScore> per_sample;
    std::string checkpoint_id;
    std::string split;
    std::string config_hash;
    double text_fraction = 1.0;
    std::string subset = "all";

    // Recomputes the means from per_sample. Throws EmptyEvaluation.
    void finalize();
    std::string table() const;
};

void to_json(nlohmann::json &j, const SampleScore &s);
void to_json(nlohmann::json &j, const MetricsReport &r);
void from_json(const nlohmann::json &j, MetricsReport &r);

}  // namespace lsms
