#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsms/config.hpp"

namespace lsms {

// Reference budget of the published model, used only for the printed report.
inline constexpr double kReferenceParamsM = 8.78;
inline constexpr double kReferenceFlopsG = 8.91;

struct BudgetEntry {
    std::string name;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

/// Analytic parameter and FLOP count at cfg's image size, batch 1.
///
/// One multiply-accumulate counts as 2 FLOPs. Convolutions, linear layers,
/// attention matmuls and the NMF updates are counted; normalisation,
/// activations, elementwise products and interpolation are not. Norm layer
/// parameters (affine scale and shift) are included in the parameter count.
struct BudgetReport {
    std::vector<BudgetEntry> entries;
    bool include_text_encoder = false;

    std::int64_t params() const;
    std::int64_t macs() const;
    std::int64_t flops() const { return 2 * macs(); }
    std::string table() const;
};

BudgetReport count_params_flops(const ModelConfig &cfg, bool include_text_encoder);

}  // namespace lsms
