#include "lsms/ablation.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

const std::map<AblationAxis, std::string_view> kAxisNames = {
    {AblationAxis::KernelSize, "kernel_size"},
    {AblationAxis::SvlaBranches, "svla_branches"},
    {AblationAxis::FsdOnOff, "fsd_on_off"},
    {AblationAxis::DecoderVariant, "decoder_variant"},
    {AblationAxis::FsdStages, "fsd_stages"},
};

std::string stage_label(const std::set<int> &stages) {
    std::string out;
    for (int s : stages) out += (out.empty() ? "S" : ",S") + std::to_string(s);
    return out;
}

// Directory-safe form of a row label.
std::string slug(const std::string &label) {
    std::string out;
    for (char c : label) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return out;
}

}  // namespace

std::string_view to_string(AblationAxis axis) { return kAxisNames.at(axis); }

AblationAxis ablation_axis_from_string(std::string_view name) {
    for (const auto &[axis, n] : kAxisNames) {
        if (n == name) return axis;
    }
    throw Error(ErrorCode::UsageError, "unknown ablation axis: " + std::string(name));
}

AblationGrid make_grid(AblationAxis axis, const ModelConfig &base) {
    AblationGrid grid{axis, {}};
    auto add = [&](std::string label, auto edit) {
        auto cfg = base;
        edit(cfg);
        cfg.validate();
        grid.variants.push_back({std::move(label), cfg});
    };
    switch (axis) {
    case AblationAxis::KernelSize:
        for (int d : {5, 7, 11, 15, 19, 21}) {
            add("d=" + std::to_string(d), [d](ModelConfig &c) { c.kernel_sizes = {d}; });
        }
        break;
    case AblationAxis::SvlaBranches: {
        const std::vector<std::vector<int>> units = {{0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
        for (const auto &u : units) {
            std::string label;
            for (int j : u) label += (label.empty() ? "ConvU" : "+ConvU") + std::to_string(j + 1);
            add(label, [&u, &base](ModelConfig &c) {
                c.kernel_sizes.clear();
                for (int j : u) c.kernel_sizes.push_back(base.kernel_sizes.at(static_cast<std::size_t>(j)));
                c.pixel_map = false;
            });
        }
        add("ConvU1+ConvU2+ConvU3+PM", [](ModelConfig &c) { c.pixel_map = true; });
        break;
    }
    case AblationAxis::FsdOnOff:
        add("LSMS (w/o FSD)", [](ModelConfig &c) { c.decoder.variant = DecoderVariant::NoFsd; });
        add("LSMS (w/ FSD)", [](ModelConfig &c) { c.decoder.variant = DecoderVariant::ConcatHead; });
        break;
    case AblationAxis::DecoderVariant:
        add("S4-Head-MLP", [](ModelConfig &c) {
            c.decoder.variant = DecoderVariant::ConcatHead;
            c.decoder.use_stages = {4};
        });
        for (auto v : {DecoderVariant::MlpConcat, DecoderVariant::ConcatHead, DecoderVariant::MlpConcatHead}) {
            add("S1,S2,S3,S4-" + std::string(to_string(v)), [v](ModelConfig &c) {
                c.decoder.variant = v;
                c.decoder.use_stages = {1, 2, 3, 4};
            });
        }
        break;
    case AblationAxis::FsdStages: {
        const std::vector<std::set<int>> subsets = {{4}, {3, 4}, {1, 2, 3}, {2, 3, 4}, {1, 2, 3, 4}};
        for (const auto &s : subsets) {
            add(stage_label(s), [&s](ModelConfig &c) {
                c.decoder.variant = DecoderVariant::ConcatHead;
                c.decoder.use_stages = s;
            });
        }
        break;
    }
    }
    return grid;
}

std::vector<AblationRow> run_ablation(const AblationGrid &grid, const TrainConfig &train_cfg,
                                      const std::vector<ReferringSample> &train_set,
                                      const std::vector<ReferringSample> &val_set, const AblationOptions &options) {
    if (val_set.empty()) throw Error(ErrorCode::EmptyEvaluation, "ablation needs a validation split");
    std::filesystem::create_directories(options.out_dir);
    std::ofstream log(options.out_dir / "ablation.jsonl", std::ios::app);
    std::vector<AblationRow> rows;
    for (const auto &variant : grid.variants) {
        AblationRow row;
        row.label = variant.label;
        const auto dir = options.out_dir / slug(variant.label);
        try {
            std::filesystem::path ckpt = dir / "best.pt";
            if (options.budget > 0) {
                auto cfg = train_cfg;
                cfg.epochs = options.budget;
                cfg.stop_after = 0;
                TrainOptions to{dir, std::nullopt, options.verbose};
                ckpt = train(variant.config, cfg, train_set, val_set, to).best_checkpoint;
            } else if (!std::filesystem::exists(ckpt)) {
                throw Error(ErrorCode::MissingFile, "no checkpoint for " + variant.label + " at " + ckpt.string());
            }
            auto loaded = load_checkpoint(ckpt);
            EvalOptions eo;
            eo.checkpoint_id = loaded.id;
            const auto report = evaluate(loaded.model, val_set, eo);
            row.dice = report.dice_mean;
            row.miou = report.miou_mean;
            row.checkpoint = ckpt.string();
        } catch (const std::exception &e) {
            row.error = e.what();
        }
        if (options.verbose) {
            std::cerr << "[" << to_string(grid.axis) << "] " << row.label << ": "
                      << (row.error.empty() ? "dice " + std::to_string(row.dice) : row.error) << "\n";
        }
        log << nlohmann::json(row).dump() << '\n';
        log.flush();
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_table(AblationAxis axis, const std::vector<AblationRow> &rows) {
    std::ostringstream out;
    out << "ablation: " << to_string(axis) << "\n";
    out << std::left << std::setw(40) << "variant" << std::right << std::setw(10) << "Dice" << std::setw(10) << "mIoU"
        << "\n";
    out << std::fixed << std::setprecision(2);
    for (const auto &r : rows) {
        out << std::left << std::setw(40) << r.label << std::right;
        if (r.error.empty()) {
            out << std::setw(10) << 100.0 * r.dice << std::setw(10) << 100.0 * r.miou << "\n";
        } else {
            out << "  failed: " << r.error << "\n";
        }
    }
    return out.str();
}

void to_json(nlohmann::json &j, const AblationRow &r) {
    j = nlohmann::json{{"variant", r.label}, {"dice", r.dice}, {"miou", r.miou}, {"checkpoint", r.checkpoint}};
    if (!r.error.empty()) j["error"] = r.error;
}

}  // namespace lsms
