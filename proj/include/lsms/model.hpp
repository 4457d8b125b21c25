#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lsms/config.hpp"
#include "lsms/decoder.hpp"
#include "lsms/text_encoder.hpp"
#include "lsms/vision_encoder.hpp"

namespace lsms {

inline constexpr const char *kCheckpointFormat = "lsms-checkpoint-v1";

struct ModelOutput {
    torch::Tensor logits;  // [B, 1, H, W]
    StageFeatures stages;
};

/// Text encoder + language-guided vision encoder + full-scale decoder.
///
/// The toy text backend is a registered submodule and is saved with the
/// model. The pretrained backend is a TorchScript module attached separately;
/// without it the model still runs on precomputed TextFeatures.
class LsmsModelImpl : public torch::nn::Module {
public:
    LsmsModelImpl(const ModelConfig &cfg, Vocabulary vocab = Vocabulary::builtin());

    TokenSequence tokenize(std::string_view expression) const;
    TokenBatch tokenize(const std::vector<std::string> &expressions) const;
    TextFeatures encode_text(const TokenBatch &tokens);

    ModelOutput forward_full(const torch::Tensor &images, const TextFeatures &text);
    torch::Tensor forward(const torch::Tensor &images, const TextFeatures &text);
    torch::Tensor forward(const torch::Tensor &images, const TokenBatch &tokens);

    // Loads the TorchScript BERT from cfg.pretrained_path (or `dir`).
    void attach_pretrained(const std::filesystem::path &dir);
    bool has_text_encoder() const;

    // Parameters the optimiser should update (honours freeze_text).
    std::vector<torch::Tensor> trainable_parameters();

    const ModelConfig &config() const { return cfg_; }
    const Tokenizer &tokenizer() const;
    const Vocabulary &vocab() const { return vocab_; }

    VisionEncoder &encoder() { return encoder_; }
    FullScaleDecoder &decoder() { return decoder_; }
    ToyTextEncoder &toy_text() { return toy_text_; }
    std::shared_ptr<PretrainedTextEncoder> pretrained_text() { return pretrained_; }

private:
    ModelConfig cfg_;
    Vocabulary vocab_;
    Tokenizer toy_tokenizer_;
    ToyTextEncoder toy_text_{nullptr};
    std::shared_ptr<PretrainedTextEncoder> pretrained_;
    VisionEncoder encoder_{nullptr};
    FullScaleDecoder decoder_{nullptr};
};
TORCH_MODULE(LsmsModel);

// Extra training state stored next to the weights in one archive.
struct TrainingState {
    int epoch = 0;
    std::int64_t step = 0;
    std::string train_config;  // JSON
    std::string history;       // JSON array of epoch records
    double best_val_dice = -1.0;
};

void save_checkpoint(const std::filesystem::path &path, LsmsModel &model, torch::optim::Optimizer *optimizer = nullptr,
                     const TrainingState *state = nullptr);

struct LoadedCheckpoint {
    LsmsModel model{nullptr};
    std::optional<TrainingState> state;
    std::string id;  // stable identifier derived from the config and file name
};

// Rebuilds the model from the stored config, then loads weights. When
// `optimizer` is given its state is restored as well.
LoadedCheckpoint load_checkpoint(const std::filesystem::path &path, torch::optim::Optimizer *optimizer = nullptr);

// Restores weights into an already constructed model (configs must match).
void load_weights(const std::filesystem::path &path, LsmsModel &model, torch::optim::Optimizer *optimizer = nullptr,
                  TrainingState *state = nullptr);

ModelConfig read_checkpoint_config(const std::filesystem::path &path);

}  // namespace lsms
