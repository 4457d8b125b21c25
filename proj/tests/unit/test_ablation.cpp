#include <gtest/gtest.h>

#include <fstream>

#include "lsms/ablation.hpp"
#include "lsms/errors.hpp"

using namespace lsms;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> labels(const AblationGrid &g) {
    std::vector<std::string> out;
    for (const auto &v : g.variants) out.push_back(v.label);
    return out;
}

}  // namespace

TEST(AblationGrid, KernelSizeRows) {
    const auto g = make_grid(AblationAxis::KernelSize, ModelConfig::toy());
    ASSERT_EQ(g.variants.size(), 6u);
    const std::vector<int> d{5, 7, 11, 15, 19, 21};
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(g.variants[i].config.kernel_sizes, std::vector<int>{d[i]});
}

TEST(AblationGrid, SvlaBranchRows) {
    const auto g = make_grid(AblationAxis::SvlaBranches, ModelConfig::toy());
    EXPECT_EQ(labels(g), (std::vector<std::string>{"ConvU1+ConvU2", "ConvU1+ConvU3", "ConvU2+ConvU3",
                                                   "ConvU1+ConvU2+ConvU3", "ConvU1+ConvU2+ConvU3+PM"}));
    EXPECT_EQ(g.variants[1].config.kernel_sizes, (std::vector<int>{7, 21}));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FALSE(g.variants[i].config.pixel_map);
    EXPECT_TRUE(g.variants[4].config.pixel_map);
    EXPECT_EQ(g.variants[4].config.kernel_sizes, (std::vector<int>{7, 11, 21}));
}

TEST(AblationGrid, DecoderRows) {
    const auto onoff = make_grid(AblationAxis::FsdOnOff, ModelConfig::toy());
    ASSERT_EQ(onoff.variants.size(), 2u);
    EXPECT_EQ(onoff.variants[0].config.decoder.variant, DecoderVariant::NoFsd);
    EXPECT_EQ(onoff.variants[1].config.decoder.variant, DecoderVariant::ConcatHead);

    const auto design = make_grid(AblationAxis::DecoderVariant, ModelConfig::toy());
    ASSERT_EQ(design.variants.size(), 4u);
    EXPECT_EQ(design.variants[0].config.decoder.use_stages, (std::set<int>{4}));
    EXPECT_EQ(design.variants[1].config.decoder.variant, DecoderVariant::MlpConcat);
    EXPECT_EQ(design.variants[3].config.decoder.variant, DecoderVariant::MlpConcatHead);

    const auto stages = make_grid(AblationAxis::FsdStages, ModelConfig::toy());
    ASSERT_EQ(stages.variants.size(), 5u);
    EXPECT_EQ(stages.variants[2].config.decoder.use_stages, (std::set<int>{1, 2, 3}));
    EXPECT_EQ(stages.variants[4].config.decoder.use_stages, (std::set<int>{1, 2, 3, 4}));
}

TEST(AblationGrid, AxisNamesRoundTrip) {
    for (auto a : {AblationAxis::KernelSize, AblationAxis::SvlaBranches, AblationAxis::FsdOnOff,
                   AblationAxis::DecoderVariant, AblationAxis::FsdStages}) {
        EXPECT_EQ(ablation_axis_from_string(to_string(a)), a);
    }
    EXPECT_THROW(ablation_axis_from_string("learning_rate"), Error);
}

TEST(Ablation, TrainsEveryRowAndRecordsFailures) {
    torch::set_num_threads(1);
    const auto dir = fs::temp_directory_path() / "lsms_ablation_test";
    fs::remove_all(dir);
    const auto train_set = generate_split(1, "train", 4, GenConfig{});
    const auto val_set = generate_split(1, "val", 2, GenConfig{});
    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.batch_size = 4;
    cfg.image_size = 96;
    AblationOptions o;
    o.out_dir = dir;
    o.budget = 1;
    o.verbose = false;

    auto grid = make_grid(AblationAxis::FsdOnOff, ModelConfig::toy());
    const auto rows = run_ablation(grid, cfg, train_set, val_set, o);
    ASSERT_EQ(rows.size(), 2u);
    for (const auto &r : rows) {
        EXPECT_TRUE(r.error.empty()) << r.error;
        EXPECT_GE(r.dice, 0.0);
        EXPECT_TRUE(fs::exists(r.checkpoint));
    }

    // Re-evaluating existing checkpoints reproduces the numbers.
    o.budget = 0;
    const auto again = run_ablation(grid, cfg, train_set, val_set, o);
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(again[i].dice, rows[i].dice);

    // A variant without a checkpoint is recorded as an error; the rest still run.
    grid.variants.insert(grid.variants.begin(), AblationVariant{"missing row", ModelConfig::toy()});
    const auto partial = run_ablation(grid, cfg, train_set, val_set, o);
    ASSERT_EQ(partial.size(), 3u);
    EXPECT_FALSE(partial[0].error.empty());
    EXPECT_TRUE(partial[1].error.empty());

    std::ifstream log(dir / "ablation.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line);) ++lines;
    EXPECT_EQ(lines, 7);
    const auto table = ablation_table(AblationAxis::FsdOnOff, partial);
    EXPECT_NE(table.find("LSMS (w/ FSD)"), std::string::npos);
    fs::remove_all(dir);
}
