#include "lsms/model.hpp"

#include <sstream>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

std::string join_lines(const std::vector<std::string> &tokens) {
    std::string out;
    for (const auto &t : tokens) out += t + '\n';
    return out;
}

std::vector<std::string> split_lines(const std::string &s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

std::string sanitize(const std::string &name) {
    std::string s = name;
    for (auto &c : s) {
        if (c == '.') c = '~';
    }
    return s;
}

std::string read_string(torch::serialize::InputArchive &archive, const std::string &key) {
    c10::IValue value;
    archive.read(key, value);
    return value.toStringRef();
}

bool try_read_string(torch::serialize::InputArchive &archive, const std::string &key, std::string &out) {
    c10::IValue value;
    if (!archive.try_read(key, value)) return false;
    out = value.toStringRef();
    return true;
}

}  // namespace

LsmsModelImpl::LsmsModelImpl(const ModelConfig &cfg, Vocabulary vocab)
    : cfg_(cfg), vocab_(std::move(vocab)), toy_tokenizer_(vocab_, TokenizerStyle::Word) {
    cfg_.validate();
    if (cfg_.text_backend == TextBackend::Toy) {
        ToyTextConfig tc;
        tc.vocab_size = vocab_.size();
        tc.channels = cfg_.text_channels;
        tc.layers = cfg_.toy_text_layers;
        tc.heads = cfg_.toy_text_heads;
        tc.max_tokens = cfg_.max_tokens;
        toy_text_ = register_module("text", ToyTextEncoder(tc));
    }
    encoder_ = register_module("encoder", VisionEncoder(cfg_));
    decoder_ = register_module("decoder", FullScaleDecoder(cfg_.stage_channels, cfg_.decoder));
    if (cfg_.text_backend == TextBackend::Pretrained && !cfg_.pretrained_path.empty() &&
        std::filesystem::exists(cfg_.pretrained_path)) {
        attach_pretrained(cfg_.pretrained_path);
    }
}

void LsmsModelImpl::attach_pretrained(const std::filesystem::path &dir) {
    if (cfg_.text_backend != TextBackend::Pretrained) {
        throw Error(ErrorCode::InvalidConfig, "model was configured with the toy text backend");
    }
    pretrained_ = PretrainedTextEncoder::load(dir);
    pretrained_->set_trainable(!cfg_.freeze_text);
    cfg_.pretrained_path = dir.string();
}

bool LsmsModelImpl::has_text_encoder() const {
    return cfg_.text_backend == TextBackend::Toy || pretrained_ != nullptr;
}

const Tokenizer &LsmsModelImpl::tokenizer() const {
    if (cfg_.text_backend == TextBackend::Pretrained) {
        if (!pretrained_) throw Error(ErrorCode::BackendUnavailable, "pretrained text encoder is not loaded");
        return pretrained_->tokenizer();
    }
    return toy_tokenizer_;
}

TokenSequence LsmsModelImpl::tokenize(std::string_view expression) const {
    return tokenizer().tokenize(expression, cfg_.max_tokens);
}

TokenBatch LsmsModelImpl::tokenize(const std::vector<std::string> &expressions) const {
    std::vector<TokenSequence> seqs;
    seqs.reserve(expressions.size());
    for (const auto &e : expressions) seqs.push_back(tokenize(e));
    return TokenBatch::from(seqs);
}

TextFeatures LsmsModelImpl::encode_text(const TokenBatch &tokens) {
    if (cfg_.text_backend == TextBackend::Toy) return toy_text_(tokens);
    if (!pretrained_) throw Error(ErrorCode::BackendUnavailable, "pretrained text encoder is not loaded");
    if (cfg_.freeze_text) {
        torch::NoGradGuard guard;
        return pretrained_->encode(tokens);
    }
    return pretrained_->encode(tokens);
}

ModelOutput LsmsModelImpl::forward_full(const torch::Tensor &images, const TextFeatures &text) {
    ModelOutput out;
    out.stages = encoder_(images, text);
    out.logits = decoder_(out.stages, images.size(2), images.size(3));
    return out;
}

torch::Tensor LsmsModelImpl::forward(const torch::Tensor &images, const TextFeatures &text) {
    return forward_full(images, text).logits;
}

torch::Tensor LsmsModelImpl::forward(const torch::Tensor &images, const TokenBatch &tokens) {
    return forward(images, encode_text(tokens));
}

std::vector<torch::Tensor> LsmsModelImpl::trainable_parameters() {
    std::vector<torch::Tensor> params;
    for (const auto &item : named_parameters()) {
        if (cfg_.freeze_text && item.key().rfind("text.", 0) == 0) continue;
        params.push_back(item.value());
    }
    if (pretrained_ && !cfg_.freeze_text) {
        for (auto &p : pretrained_->parameters()) params.push_back(p);
    }
    return params;
}

void save_checkpoint(const std::filesystem::path &path, LsmsModel &model, torch::optim::Optimizer *optimizer,
                     const TrainingState *state) {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
    archive.write("config", c10::IValue(nlohmann::json(model->config()).dump()));
    archive.write("vocab", c10::IValue(join_lines(model->vocab().tokens())));

    torch::serialize::OutputArchive weights;
    model->save(weights);
    archive.write("model", weights);

    if (auto pretrained = model->pretrained_text()) {
        torch::serialize::OutputArchive text;
        for (const auto &p : pretrained->module().named_parameters()) text.write(sanitize(p.name), p.value);
        archive.write("text_pretrained", text);
    }
    if (optimizer) {
        torch::serialize::OutputArchive opt;
        optimizer->save(opt);
        archive.write("optimizer", opt);
    }
    if (state) {
        archive.write("epoch", c10::IValue(static_cast<int64_t>(state->epoch)));
        archive.write("step", c10::IValue(state->step));
        archive.write("train_config", c10::IValue(state->train_config));
        archive.write("history", c10::IValue(state->history));
        archive.write("best_val_dice", c10::IValue(state->best_val_dice));
    }
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    archive.save_to(path.string());
}

namespace {

torch::serialize::InputArchive open_archive(const std::filesystem::path &path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    std::string format;
    if (!try_read_string(archive, "format", format) || format != kCheckpointFormat) {
        throw Error(ErrorCode::MalformedRecord, "unsupported checkpoint format in " + path.string());
    }
    return archive;
}

void restore(torch::serialize::InputArchive &archive, LsmsModel &model, torch::optim::Optimizer *optimizer,
             TrainingState *state) {
    torch::serialize::InputArchive weights;
    archive.read("model", weights);
    model->load(weights);

    if (auto pretrained = model->pretrained_text()) {
        torch::serialize::InputArchive text;
        if (archive.try_read("text_pretrained", text)) {
            torch::NoGradGuard guard;
            for (const auto &p : pretrained->module().named_parameters()) {
                torch::Tensor stored;
                if (text.try_read(sanitize(p.name), stored)) p.value.copy_(stored);
            }
        }
    }
    if (optimizer) {
        torch::serialize::InputArchive opt;
        if (archive.try_read("optimizer", opt)) optimizer->load(opt);
    }
    if (state) {
        c10::IValue v;
        if (archive.try_read("epoch", v)) {
            state->epoch = static_cast<int>(v.toInt());
            archive.read("step", v);
            state->step = v.toInt();
            state->train_config = read_string(archive, "train_config");
            state->history = read_string(archive, "history");
            archive.read("best_val_dice", v);
            state->best_val_dice = v.toDouble();
        }
    }
}

}  // namespace

ModelConfig read_checkpoint_config(const std::filesystem::path &path) {
    auto archive = open_archive(path);
    return nlohmann::json::parse(read_string(archive, "config")).get<ModelConfig>();
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path &path, torch::optim::Optimizer *optimizer) {
    auto archive = open_archive(path);
    auto config_json = read_string(archive, "config");
    auto cfg = nlohmann::json::parse(config_json).get<ModelConfig>();
    auto vocab = Vocabulary::from_tokens(split_lines(read_string(archive, "vocab")));

    LoadedCheckpoint out;
    out.model = LsmsModel(cfg, vocab);
    TrainingState state;
    state.epoch = -1;
    restore(archive, out.model, optimizer, &state);
    if (state.epoch >= 0) out.state = state;
    out.id = path.stem().string() + "-" + hex_digest(config_json).substr(0, 8);
    out.model->eval();
    return out;
}

void load_weights(const std::filesystem::path &path, LsmsModel &model, torch::optim::Optimizer *optimizer,
                  TrainingState *state) {
    auto archive = open_archive(path);
    auto stored = read_string(archive, "config");
    if (stored != nlohmann::json(model->config()).dump()) {
        throw Error(ErrorCode::InvalidConfig, "checkpoint config does not match the model");
    }
    restore(archive, model, optimizer, state);
}

}  // namespace lsms
