#include "lsms/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "lsms/errors.hpp"

namespace lsms {

void TrainConfig::validate() const {
    if (!(lr > 0.0) || epochs < 1 || batch_size < 1 || image_size < 32 || image_size % 32 != 0 ||
        lambda_bce < 0.0 || lambda_dice < 0.0 || (lambda_bce == 0.0 && lambda_dice == 0.0) || weight_decay < 0.0 ||
        text_fraction <= 0.0 || val_fraction < 0.0 || val_fraction >= 1.0 || stop_after < 0) {
        throw Error(ErrorCode::InvalidConfig, "invalid training configuration");
    }
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"poly_power", c.poly_power},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"image_size", c.image_size},
                       {"seed", c.seed},
                       {"lambda_bce", c.lambda_bce},
                       {"lambda_dice", c.lambda_dice},
                       {"text_fraction", c.text_fraction},
                       {"fraction_augment", c.fraction_augment},
                       {"flip_augment", c.flip_augment},
                       {"val_fraction", c.val_fraction},
                       {"stop_after", c.stop_after}};
}

void from_json(const nlohmann::json &j, TrainConfig &c) {
    TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.poly_power = j.value("poly_power", d.poly_power);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.image_size = j.value("image_size", d.image_size);
    c.seed = j.value("seed", d.seed);
    c.lambda_bce = j.value("lambda_bce", d.lambda_bce);
    c.lambda_dice = j.value("lambda_dice", d.lambda_dice);
    c.text_fraction = j.value("text_fraction", d.text_fraction);
    c.fraction_augment = j.value("fraction_augment", d.fraction_augment);
    c.flip_augment = j.value("flip_augment", d.flip_augment);
    c.val_fraction = j.value("val_fraction", d.val_fraction);
    c.stop_after = j.value("stop_after", d.stop_after);
}

void apply_key_values(TrainConfig &cfg, const KeyValues &kv, std::vector<std::string> *unused) {
    for (const auto &[key, value] : kv) {
        try {
            if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
            else if (key == "poly_power") cfg.poly_power = std::stod(value);
            else if (key == "epochs") cfg.epochs = std::stoi(value);
            else if (key == "batch_size") cfg.batch_size = std::stoi(value);
            else if (key == "image_size") cfg.image_size = std::stoi(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "lambda_bce") cfg.lambda_bce = std::stod(value);
            else if (key == "lambda_dice") cfg.lambda_dice = std::stod(value);
            else if (key == "text_fraction") cfg.text_fraction = std::stod(value);
            else if (key == "fraction_augment") cfg.fraction_augment = value == "true" || value == "1";
            else if (key == "flip_augment") cfg.flip_augment = value == "true" || value == "1";
            else if (key == "val_fraction") cfg.val_fraction = std::stod(value);
            else if (key == "stop_after") cfg.stop_after = std::stoi(value);
            else if (unused) unused->push_back(key);
        } catch (const std::logic_error &) {
            throw Error(ErrorCode::InvalidConfig, "bad value for " + key + ": " + value);
        }
    }
}

double poly_lr(double lr0, std::int64_t step, std::int64_t total, double power) {
    if (total <= 0 || step >= total) return 0.0;
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

torch::Tensor segmentation_loss(const torch::Tensor &logits, const torch::Tensor &gt, double lambda_bce,
                                double lambda_dice) {
    if (logits.sizes() != gt.sizes()) {
        throw Error(ErrorCode::ShapeMismatch, "loss expects logits and masks of the same shape");
    }
    auto total = torch::zeros({}, logits.options());
    if (lambda_bce > 0.0) total = total + lambda_bce * torch::binary_cross_entropy_with_logits(logits, gt);
    if (lambda_dice > 0.0) {
        const auto p = torch::sigmoid(logits).flatten(1);
        const auto g = gt.flatten(1);
        constexpr double smooth = 1.0;
        const auto soft = (2.0 * (p * g).sum(1) + smooth) / (p.sum(1) + g.sum(1) + smooth);
        total = total + lambda_dice * (1.0 - soft).mean();
    }
    return total;
}

TensorSet to_tensors(const std::vector<ReferringSample> &samples, int height, int width) {
    TensorSet set;
    const auto n = static_cast<std::int64_t>(samples.size());
    set.images = torch::empty({n, 3, height, width});
    set.masks = torch::empty({n, 1, height, width});
    for (std::int64_t i = 0; i < n; ++i) {
        const auto &s = samples[static_cast<std::size_t>(i)];
        const bool same = s.image.height == height && s.image.width == width;
        set.images[i] = image_to_tensor(same ? s.image : resize(s.image, height, width, Interpolation::Bilinear));
        set.masks[i][0] = mask_to_tensor(same ? s.mask : resize(s.mask, height, width, Interpolation::Nearest));
        set.expressions.push_back(s.expression);
        set.ids.push_back(s.id);
    }
    return set;
}

void to_json(nlohmann::json &j, const EpochRecord &r) {
    j = nlohmann::json{{"epoch", r.epoch},       {"step", r.step},         {"loss", r.loss},
                       {"lr", r.lr},             {"val_dice", r.val_dice}, {"val_miou", r.val_miou},
                       {"seconds", r.seconds}};
}

void from_json(const nlohmann::json &j, EpochRecord &r) {
    r.epoch = j.at("epoch").get<int>();
    r.step = j.at("step").get<std::int64_t>();
    r.loss = j.at("loss").get<double>();
    r.lr = j.at("lr").get<double>();
    r.val_dice = j.at("val_dice").get<double>();
    r.val_miou = j.at("val_miou").get<double>();
    r.seconds = j.value("seconds", 0.0);
}

namespace {

torch::Tensor epoch_order(std::uint64_t seed, int epoch, std::int64_t n) {
    auto gen = at::detail::createCPUGenerator(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch) + 1);
    return torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kLong));
}

std::vector<std::string> batch_expressions(const std::vector<ReferringSample> &samples, const torch::Tensor &index,
                                           const TrainConfig &cfg, int epoch) {
    std::vector<std::string> out;
    const auto idx = index.accessor<std::int64_t, 1>();
    for (std::int64_t k = 0; k < idx.size(0); ++k) {
        const auto &s = samples[static_cast<std::size_t>(idx[k])];
        double fraction = cfg.text_fraction;
        if (cfg.fraction_augment) {
            static constexpr double choices[] = {0.25, 0.5, 1.0};
            const auto h = derive_seed(cfg.seed + static_cast<std::uint64_t>(epoch), "fraction",
                                       static_cast<std::uint64_t>(idx[k]));
            fraction = choices[h % 3];
        }
        out.push_back(fraction >= 1.0 ? s.expression : partial_text(s, fraction));
    }
    return out;
}

// Flips each sample of the batch with probability 1/2 per axis, rewriting
// the position words of its expression to match.
void flip_batch(torch::Tensor &images, torch::Tensor &masks, std::vector<std::string> &expressions,
                const torch::Tensor &index, const TrainConfig &cfg, int epoch) {
    const auto idx = index.accessor<std::int64_t, 1>();
    for (std::int64_t k = 0; k < idx.size(0); ++k) {
        const auto h = derive_seed(cfg.seed + static_cast<std::uint64_t>(epoch), "flip", static_cast<std::uint64_t>(idx[k]));
        const bool horizontal = h & 1;
        const bool vertical = (h >> 1) & 1;
        if (!horizontal && !vertical) continue;
        std::vector<int64_t> dims;
        if (vertical) dims.push_back(1);
        if (horizontal) dims.push_back(2);
        images[k] = images[k].flip(dims);
        masks[k] = masks[k].flip(dims);
        auto &e = expressions[static_cast<std::size_t>(k)];
        e = mirror_expression(e, horizontal, vertical);
    }
}

void dump_batch(const std::filesystem::path &path, int epoch, std::int64_t batch, const std::vector<ReferringSample> &samples,
                const torch::Tensor &index, const std::vector<std::string> &expressions) {
    nlohmann::json j{{"epoch", epoch}, {"batch", batch}, {"samples", nlohmann::json::array()}};
    const auto idx = index.accessor<std::int64_t, 1>();
    for (std::int64_t k = 0; k < idx.size(0); ++k) {
        const auto &s = samples[static_cast<std::size_t>(idx[k])];
        j["samples"].push_back({{"id", s.id}, {"seed", s.seed}, {"expression", expressions[static_cast<std::size_t>(k)]}});
    }
    std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace

TrainResult train(const ModelConfig &model_cfg, const TrainConfig &cfg, const std::vector<ReferringSample> &train_set,
                  const std::vector<ReferringSample> &val_set, const TrainOptions &options) {
    cfg.validate();
    if (train_set.empty()) throw Error(ErrorCode::EmptyEvaluation, "training set is empty");
    auto mcfg = model_cfg;
    mcfg.image_height = mcfg.image_width = cfg.image_size;
    mcfg.validate();
    std::filesystem::create_directories(options.out_dir);

    torch::manual_seed(cfg.seed);
    LsmsModel model(mcfg);
    if (mcfg.text_backend == TextBackend::Pretrained) model->attach_pretrained(mcfg.pretrained_path);
    torch::optim::AdamW optimizer(model->trainable_parameters(),
                                  torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));

    TrainResult result;
    result.best_checkpoint = options.out_dir / "best.pt";
    result.last_checkpoint = options.out_dir / "last.pt";
    TrainingState state;
    state.train_config = nlohmann::json(cfg).dump();
    int start_epoch = 0;
    if (options.resume) {
        load_weights(*options.resume, model, &optimizer, &state);
        start_epoch = state.epoch;
        result.best_val_dice = state.best_val_dice;
        auto history = nlohmann::json::parse(state.history.empty() ? "[]" : state.history);
        result.history = history.get<std::vector<EpochRecord>>();
    }

    const auto data = to_tensors(train_set, cfg.image_size, cfg.image_size);
    const auto n = data.images.size(0);
    const std::int64_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = batches * cfg.epochs;
    const int end_epoch = cfg.stop_after > 0 ? std::min(cfg.epochs, start_epoch + cfg.stop_after) : cfg.epochs;

    std::ofstream log(options.out_dir / "train_log.jsonl", std::ios::app);
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        model->train();
        const auto order = epoch_order(cfg.seed, epoch, n);
        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::int64_t b = 0; b < batches; ++b) {
            const auto index = order.slice(0, b * cfg.batch_size, std::min(n, (b + 1) * cfg.batch_size));
            auto expressions = batch_expressions(train_set, index, cfg, epoch);
            auto images = data.images.index_select(0, index);
            auto masks = data.masks.index_select(0, index);
            if (cfg.flip_augment) flip_batch(images, masks, expressions, index, cfg, epoch);
            lr = poly_lr(cfg.lr, state.step, total_steps, cfg.poly_power);
            for (auto &group : optimizer.param_groups()) {
                static_cast<torch::optim::AdamWOptions &>(group.options()).lr(lr);
            }
            const auto logits = model->forward(images, model->tokenize(expressions));
            const auto loss = segmentation_loss(logits, masks, cfg.lambda_bce, cfg.lambda_dice);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                const auto dump = options.out_dir / "nonfinite_batch.json";
                dump_batch(dump, epoch, b, train_set, index, expressions);
                throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                                          std::to_string(b) + "; batch written to " + dump.string());
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            loss_sum += value * static_cast<double>(index.size(0));
            ++state.step;
        }

        EpochRecord record;
        record.epoch = epoch + 1;
        record.step = state.step;
        record.loss = loss_sum / static_cast<double>(n);
        record.lr = lr;
        if (!val_set.empty()) {
            EvalOptions eo;
            auto report = evaluate(model, val_set, eo);
            record.val_dice = report.dice_mean;
            record.val_miou = report.miou_mean;
        }
        record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(record);
        log << nlohmann::json(record).dump() << '\n';
        log.flush();
        if (options.verbose) {
            std::cerr << std::fixed << std::setprecision(4) << "epoch " << record.epoch << "/" << cfg.epochs
                      << " loss " << record.loss << " val_dice " << record.val_dice << " val_miou " << record.val_miou
                      << " (" << std::setprecision(1) << record.seconds << " s)\n";
        }

        state.epoch = epoch + 1;
        state.history = nlohmann::json(result.history).dump();
        const bool improved = !val_set.empty() && record.val_dice > result.best_val_dice;
        if (improved) result.best_val_dice = record.val_dice;
        state.best_val_dice = result.best_val_dice;
        if (improved || val_set.empty()) save_checkpoint(result.best_checkpoint, model, nullptr, &state);
        save_checkpoint(result.last_checkpoint, model, &optimizer, &state);
    }
    return result;
}

torch::Tensor predict(LsmsModel &model, const torch::Tensor &images, const std::vector<std::string> &expressions,
                      double threshold, int batch_size) {
    torch::NoGradGuard guard;
    model->eval();
    const auto n = images.size(0);
    std::vector<torch::Tensor> parts;
    for (std::int64_t b = 0; b < n; b += batch_size) {
        const auto e = std::min(n, b + batch_size);
        std::vector<std::string> ex(expressions.begin() + b, expressions.begin() + e);
        parts.push_back(predict_mask(model->forward(images.slice(0, b, e), model->tokenize(ex)), threshold));
    }
    return torch::cat(parts, 0);
}

MetricsReport evaluate(LsmsModel &model, const std::vector<ReferringSample> &samples, const EvalOptions &options) {
    std::vector<ReferringSample> chosen;
    for (const auto &s : samples) {
        if (options.disambiguation_only && !s.disambiguation) continue;
        chosen.push_back(s);
    }
    if (chosen.empty()) throw Error(ErrorCode::EmptyEvaluation, "no samples selected for evaluation");
    const auto &cfg = model->config();
    auto data = to_tensors(chosen, cfg.image_height, cfg.image_width);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        if (options.expression_override) data.expressions[i] = *options.expression_override;
        else if (options.text_fraction < 1.0) data.expressions[i] = partial_text(chosen[i], options.text_fraction);
    }
    const auto pred = predict(model, data.images, data.expressions, options.threshold, options.batch_size);

    MetricsReport report;
    report.split = options.split;
    report.checkpoint_id = options.checkpoint_id;
    report.config_hash = cfg.hash();
    report.text_fraction = options.text_fraction;
    report.subset = options.expression_override ? "text-ablated" : "all";
    if (options.disambiguation_only) report.subset = options.expression_override ? "disambiguation,text-ablated" : "disambiguation";
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto c = count_overlap(pred[static_cast<std::int64_t>(i)], data.masks[static_cast<std::int64_t>(i)][0]);
        report.per_sample.push_back({chosen[i].id, dice(c), iou(c)});
    }
    report.finalize();
    return report;
}

MetricsReport evaluate_predictions(const std::vector<torch::Tensor> &predictions,
                                   const std::vector<ReferringSample> &samples) {
    if (predictions.size() != samples.size()) {
        throw Error(ErrorCode::ShapeMismatch, "prediction count does not match sample count");
    }
    MetricsReport report;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto c = count_overlap(predictions[i], mask_to_tensor(samples[i].mask));
        report.per_sample.push_back({samples[i].id, dice(c), iou(c)});
    }
    report.finalize();
    return report;
}

}  // namespace lsms
