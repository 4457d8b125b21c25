// Command-line entry point: data generation, training, evaluation,
// ablations, inference, visualisation, budget counting and the HTTP service.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "lsms/ablation.hpp"
#include "lsms/budget.hpp"
#include "lsms/errors.hpp"
#include "lsms/model.hpp"
#include "lsms/service.hpp"
#include "lsms/synthetic.hpp"
#include "lsms/training.hpp"
#include "lsms/visualize.hpp"

namespace fs = std::filesystem;
using namespace lsms;

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::string config;
    std::string out;
};

void add_common(CLI::App *app, Common &c, bool out_required = false) {
    app->add_option("--seed", c.seed, "Random seed");
    app->add_option("--config", c.config, "Flat key = value config file (model and training keys)");
    auto *out = app->add_option("--out", c.out, "Output path");
    if (out_required) out->required();
}

struct Configs {
    ModelConfig model = ModelConfig::toy();
    TrainConfig train;
};

// Applies the config file; an unknown key is a usage error.
Configs load_configs(const std::string &path) {
    Configs c;
    c.train.image_size = c.model.image_height;
    if (path.empty()) {
        c.train.lr = 2e-3;
        c.train.epochs = 30;
        return c;
    }
    const auto kv = read_key_values(path);
    std::vector<std::string> unused_model, unused_train;
    apply_key_values(c.model, kv, &unused_model);
    c.train.image_size = c.model.image_height;
    apply_key_values(c.train, kv, &unused_train);
    for (const auto &key : unused_model) {
        if (std::find(unused_train.begin(), unused_train.end(), key) != unused_train.end()) {
            throw Error(ErrorCode::UsageError, "unknown config key '" + key + "' in " + path);
        }
    }
    c.model.image_height = c.model.image_width = c.train.image_size;
    c.model.validate();
    c.train.validate();
    return c;
}

std::vector<ReferringSample> load_split_or_empty(const fs::path &root, const std::string &split) {
    if (!fs::exists(root / split / "annotations.jsonl")) return {};
    return load_dataset(root, split);
}

void write_text(const fs::path &path, const std::string &text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream(path) << text;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"LSMS referring lesion segmentation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    int threads = 0;
    app.add_option("--threads", threads, "Intra-op threads (0 = library default)");

    // gen-data
    Common gen;
    int gen_n = 100, gen_val = 0, gen_size = 96, gen_min = 2, gen_max = 5;
    double gen_disamb = 0.0;
    std::string gen_split = "train";
    auto *gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic referring-segmentation dataset");
    add_common(gen_cmd, gen, true);
    gen_cmd->add_option("--n", gen_n, "Samples in the main split")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--split", gen_split, "Name of the main split");
    gen_cmd->add_option("--val-n", gen_val, "Also write a 'val' split with this many samples")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--image-size", gen_size, "Square image side in pixels");
    gen_cmd->add_option("--min-lesions", gen_min, "Minimum lesions per image");
    gen_cmd->add_option("--max-lesions", gen_max, "Maximum lesions per image");
    gen_cmd->add_option("--disambiguation-rate", gen_disamb, "Share of samples with look-alike lesions")
        ->check(CLI::Range(0.0, 1.0));

    // train
    Common tr;
    std::string tr_data, tr_resume;
    int tr_epochs = 0;
    double tr_lr = 0.0;
    bool tr_quiet = false;
    auto *train_cmd = app.add_subcommand("train", "Train a model on a dataset directory");
    add_common(train_cmd, tr, true);
    train_cmd->add_option("--data", tr_data, "Dataset root with a train split (and optionally val)")->required();
    train_cmd->add_option("--epochs", tr_epochs, "Override the configured epoch count");
    train_cmd->add_option("--lr", tr_lr, "Override the configured learning rate");
    train_cmd->add_option("--resume", tr_resume, "Resume from a last.pt checkpoint");
    train_cmd->add_flag("--quiet", tr_quiet, "Do not print per-epoch progress");

    // eval
    Common ev;
    std::string ev_ckpt, ev_data, ev_split = "val", ev_override;
    double ev_fraction = 1.0, ev_threshold = 0.5;
    bool ev_disamb = false;
    auto *eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (Dice / mIoU)");
    add_common(eval_cmd, ev);
    eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--data", ev_data, "Dataset root")->required();
    eval_cmd->add_option("--split", ev_split, "Split to evaluate");
    eval_cmd->add_option("--text-fraction", ev_fraction, "Share of clauses kept (0.25, 0.5, 1.0)");
    eval_cmd->add_option("--replace-text", ev_override, "Evaluate with this constant expression");
    eval_cmd->add_flag("--disambiguation-only", ev_disamb, "Restrict to the look-alike subset");
    eval_cmd->add_option("--threshold", ev_threshold, "Foreground probability threshold");

    // ablate
    Common ab;
    std::string ab_axis, ab_data;
    int ab_budget = 0;
    auto *ablate_cmd = app.add_subcommand("ablate", "Run one ablation grid");
    add_common(ablate_cmd, ab, true);
    ablate_cmd->add_option("--axis", ab_axis, "kernel_size | svla_branches | fsd_on_off | decoder_variant | fsd_stages")
        ->required();
    ablate_cmd->add_option("--data", ab_data, "Dataset root with train and val splits")->required();
    ablate_cmd->add_option("--budget", ab_budget, "Epochs per variant; 0 evaluates existing checkpoints");

    // infer
    Common inf;
    std::string inf_ckpt, inf_image, inf_text;
    double inf_threshold = 0.5;
    auto *infer_cmd = app.add_subcommand("infer", "Segment one image for one expression");
    add_common(infer_cmd, inf, true);
    infer_cmd->add_option("--ckpt", inf_ckpt, "Checkpoint file")->required();
    infer_cmd->add_option("--image", inf_image, "Input raster")->required()->check(CLI::ExistingFile);
    infer_cmd->add_option("--text", inf_text, "Referring expression")->required();
    infer_cmd->add_option("--threshold", inf_threshold, "Foreground probability threshold");

    // visualize
    Common vis;
    std::string vis_ckpt, vis_data, vis_split = "val", vis_image, vis_text;
    int vis_index = 0;
    auto *vis_cmd = app.add_subcommand("visualize", "Write per-stage heatmaps and a prediction overlay");
    add_common(vis_cmd, vis, true);
    vis_cmd->add_option("--ckpt", vis_ckpt, "Checkpoint file")->required();
    vis_cmd->add_option("--data", vis_data, "Dataset root (with --index)");
    vis_cmd->add_option("--split", vis_split, "Dataset split");
    vis_cmd->add_option("--index", vis_index, "Sample index within the split");
    vis_cmd->add_option("--image", vis_image, "Input raster (instead of --data)");
    vis_cmd->add_option("--text", vis_text, "Expression (required with --image)");

    // count
    Common cnt;
    bool cnt_text = false;
    auto *count_cmd = app.add_subcommand("count", "Analytic parameter and FLOP count");
    add_common(count_cmd, cnt);
    count_cmd->add_flag("--include-text", cnt_text, "Include the language encoder");

    // serve
    Common srv;
    std::string srv_ckpt, srv_host = "127.0.0.1", srv_samples;
    int srv_port = 8080, srv_max_side = 2048;
    auto *serve_cmd = app.add_subcommand("serve", "HTTP inference service");
    add_common(serve_cmd, srv);
    serve_cmd->add_option("--ckpt", srv_ckpt, std::string("Checkpoint (default: $") + kCheckpointEnv + ")");
    serve_cmd->add_option("--host", srv_host, "Bind address");
    serve_cmd->add_option("--port", srv_port, "Port");
    serve_cmd->add_option("--samples", srv_samples, "Directory of bundled demo images");
    serve_cmd->add_option("--max-side", srv_max_side, "Largest accepted image side (413 above)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (threads > 0) at::set_num_threads(threads);

    try {
        if (*gen_cmd) {
            GenConfig g;
            g.image_size = gen_size;
            g.min_lesions = gen_min;
            g.max_lesions = gen_max;
            g.disambiguation_rate = gen_disamb;
            const auto m = write_dataset(gen.out, gen_split, gen_n, gen.seed, g);
            std::cout << "wrote " << m.records.size() << " samples to " << (fs::path(gen.out) / gen_split) << "\n";
            if (gen_val > 0) {
                const auto v = write_dataset(gen.out, "val", gen_val, gen.seed, g);
                std::cout << "wrote " << v.records.size() << " samples to " << (fs::path(gen.out) / "val") << "\n";
            }
        } else if (*train_cmd) {
            auto c = load_configs(tr.config);
            c.train.seed = tr.seed;
            if (tr_epochs > 0) c.train.epochs = tr_epochs;
            if (tr_lr > 0.0) c.train.lr = tr_lr;
            auto train_set = load_dataset(tr_data, "train");
            auto val_set = load_split_or_empty(tr_data, "val");
            if (val_set.empty()) {
                std::tie(train_set, val_set) = split_train_val(std::move(train_set), c.train.val_fraction, c.train.seed);
            }
            TrainOptions to;
            to.out_dir = tr.out;
            to.verbose = !tr_quiet;
            if (!tr_resume.empty()) to.resume = tr_resume;
            const auto result = train(c.model, c.train, train_set, val_set, to);
            std::cout << "best val Dice " << result.best_val_dice << "\nbest " << result.best_checkpoint.string()
                      << "\nlast " << result.last_checkpoint.string() << "\n";
        } else if (*eval_cmd) {
            auto loaded = load_checkpoint(ev_ckpt);
            const auto samples = load_dataset(ev_data, ev_split);
            EvalOptions eo;
            eo.text_fraction = ev_fraction;
            eo.disambiguation_only = ev_disamb;
            eo.threshold = ev_threshold;
            eo.split = ev_split;
            eo.checkpoint_id = loaded.id;
            if (!ev_override.empty()) eo.expression_override = ev_override;
            const auto report = evaluate(loaded.model, samples, eo);
            std::cout << report.table();
            if (!ev.out.empty()) write_text(ev.out, nlohmann::json(report).dump(2) + "\n");
        } else if (*ablate_cmd) {
            auto c = load_configs(ab.config);
            c.train.seed = ab.seed;
            const auto axis = ablation_axis_from_string(ab_axis);
            const auto grid = make_grid(axis, c.model);
            auto train_set = load_dataset(ab_data, "train");
            auto val_set = load_split_or_empty(ab_data, "val");
            if (val_set.empty()) {
                std::tie(train_set, val_set) = split_train_val(std::move(train_set), c.train.val_fraction, c.train.seed);
            }
            torch::manual_seed(ab.seed);
            AblationOptions ao{ab.out, ab_budget, true};
            const auto rows = run_ablation(grid, c.train, train_set, val_set, ao);
            const auto table = ablation_table(axis, rows);
            std::cout << table;
            write_text(fs::path(ab.out) / "ablation.txt", table);
            bool failed = false;
            for (const auto &r : rows) failed = failed || !r.error.empty();
            return failed ? 1 : 0;
        } else if (*infer_cmd) {
            auto loaded = load_checkpoint(inf_ckpt);
            const auto image = read_image(inf_image, 3);
            SegmentService service({});
            service.set_model(loaded.model, loaded.id);
            SegmentRequest req;
            std::ifstream in(inf_image, std::ios::binary);
            req.image_bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
            req.expression = inf_text;
            req.threshold = inf_threshold;
            req.return_raster = true;
            const auto reply = service.segment(req);
            const auto j = nlohmann::json::parse(reply.body);
            if (reply.status != 200) throw Error(ErrorCode::UsageError, j["error"]["message"].get<std::string>());
            write_text(inf.out, base64_decode(j["mask_png"].get<std::string>()));
            std::cout << "mask " << j["height"] << "x" << j["width"] << " written to " << inf.out << "\n";
        } else if (*vis_cmd) {
            auto loaded = load_checkpoint(vis_ckpt);
            Image8 image, gt;
            std::string text = vis_text;
            if (!vis_image.empty()) {
                if (text.empty()) throw Error(ErrorCode::UsageError, "--text is required with --image");
                image = read_image(vis_image, 3);
            } else if (!vis_data.empty()) {
                const auto samples = load_dataset(vis_data, vis_split);
                if (vis_index < 0 || vis_index >= static_cast<int>(samples.size())) {
                    throw Error(ErrorCode::UsageError, "--index out of range");
                }
                const auto &s = samples[static_cast<std::size_t>(vis_index)];
                image = s.image;
                gt = s.mask;
                if (text.empty()) text = s.expression;
            } else {
                throw Error(ErrorCode::UsageError, "either --data or --image is required");
            }
            for (const auto &f : visualize_stages(loaded.model, image, text, gt, vis.out)) std::cout << f.string() << "\n";
        } else if (*count_cmd) {
            auto model = ModelConfig::full();
            if (!cnt.config.empty()) model = load_configs(cnt.config).model;
            const auto report = count_params_flops(model, cnt_text);
            std::cout << report.table();
            if (!cnt.out.empty()) {
                nlohmann::json j{{"params", report.params()}, {"flops", report.flops()},
                                 {"reference_params_m", kReferenceParamsM}, {"reference_flops_g", kReferenceFlopsG}};
                write_text(cnt.out, j.dump(2) + "\n");
            }
        } else if (*serve_cmd) {
            if (srv_ckpt.empty()) {
                const char *env = std::getenv(kCheckpointEnv);
                if (!env) throw Error(ErrorCode::UsageError, std::string("--ckpt or $") + kCheckpointEnv + " is required");
                srv_ckpt = env;
            }
            SegmentService service({srv_ckpt, srv_samples, srv_max_side});
            service.start_loading();
            run_server(service, srv_host, srv_port);
        }
    } catch (const Error &e) {
        nlohmann::json j{{"error", {{"code", to_string(e.code())}, {"message", e.what()}}}};
        std::cerr << j.dump() << "\n";
        return e.code() == ErrorCode::UsageError ? 2 : 1;
    } catch (const std::exception &e) {
        nlohmann::json j{{"error", {{"code", "Internal"}, {"message", e.what()}}}};
        std::cerr << j.dump() << "\n";
        return 1;
    }
    return 0;
}
