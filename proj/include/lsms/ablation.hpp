#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lsms/config.hpp"
#include "lsms/synthetic.hpp"
#include "lsms/training.hpp"

namespace lsms {

enum class AblationAxis { KernelSize, SvlaBranches, FsdOnOff, DecoderVariant, FsdStages };

std::string_view to_string(AblationAxis axis);
AblationAxis ablation_axis_from_string(std::string_view name);

struct AblationVariant {
    std::string label;
    ModelConfig config;
};

struct AblationGrid {
    AblationAxis axis;
    std::vector<AblationVariant> variants;
};

// Rows of one ablation sub-table applied on top of `base`.
AblationGrid make_grid(AblationAxis axis, const ModelConfig &base);

struct AblationRow {
    std::string label;
    double dice = 0.0;
    double miou = 0.0;
    std::string checkpoint;
    std::string error;  // non-empty when the variant failed
};

struct AblationOptions {
    std::filesystem::path out_dir;
    // Epochs per variant. 0 evaluates existing checkpoints
    // (out_dir/<label>/best.pt) without training.
    int budget = 0;
    bool verbose = true;
};

/// Trains and evaluates every variant with the same seeds and budget. Rows
/// are appended to out_dir/ablation.jsonl as they finish, so partial results
/// survive a failure; a failing variant is recorded and the run continues.
std::vector<AblationRow> run_ablation(const AblationGrid &grid, const TrainConfig &train_cfg,
                                      const std::vector<ReferringSample> &train_set,
                                      const std::vector<ReferringSample> &val_set, const AblationOptions &options);

std::string ablation_table(AblationAxis axis, const std::vector<AblationRow> &rows);

void to_json(nlohmann::json &j, const AblationRow &r);

}  // namespace lsms
