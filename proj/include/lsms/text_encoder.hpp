#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <torch/script.h>
#include <torch/torch.h>

namespace lsms {

// Reserved ids shared by both backends' vocabularies.
inline constexpr std::int64_t kPadId = 0;
inline constexpr int kDefaultMaxTokens = 24;

struct TokenSequence {
    std::vector<std::int64_t> ids;
    std::vector<bool> valid;
    std::string raw_text;

    int length() const { return static_cast<int>(ids.size()); }
    int valid_count() const;
};

// Batched token ids [B, T] (int64) and validity [B, T] (bool).
struct TokenBatch {
    torch::Tensor ids;
    torch::Tensor valid;

    static TokenBatch from(const std::vector<TokenSequence> &sequences);
};

// Linguistic features L laid out as [B, C_l, T] plus the token-validity mask
// [B, T]. Masked columns are never zeroed; consumers must mask attention.
struct TextFeatures {
    torch::Tensor features;
    torch::Tensor mask;

    int64_t channels() const { return features.size(1); }
    int64_t tokens() const { return features.size(2); }
};

class Vocabulary {
public:
    // Builds the closed vocabulary used by the synthetic benchmark grammar.
    static Vocabulary builtin();
    // One token per line, UTF-8. [PAD] must be line 0; [UNK], [CLS] and [SEP]
    // are looked up by name.
    static Vocabulary from_file(const std::filesystem::path &path);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    void save(const std::filesystem::path &path) const;

    std::int64_t id(std::string_view token) const;
    bool contains(std::string_view token) const;
    std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
    const std::vector<std::string> &tokens() const { return tokens_; }

    std::int64_t unk_id() const { return unk_id_; }
    std::int64_t cls_id() const { return cls_id_; }
    std::int64_t sep_id() const { return sep_id_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> index_;
    std::int64_t unk_id_ = 1;
    std::int64_t cls_id_ = 2;
    std::int64_t sep_id_ = 3;
};

enum class TokenizerStyle {
    Word,       // lowercase words, no specials (toy backend)
    WordPiece,  // BERT-style basic split + greedy wordpiece, [CLS] ... [SEP]
};

class Tokenizer {
public:
    Tokenizer(Vocabulary vocab, TokenizerStyle style) : vocab_(std::move(vocab)), style_(style) {}

    // Throws EmptyExpression for blank input. Overlong input is truncated to
    // max_tokens with a warning on stderr.
    TokenSequence tokenize(std::string_view expression, int max_tokens = kDefaultMaxTokens) const;

    const Vocabulary &vocab() const { return vocab_; }
    TokenizerStyle style() const { return style_; }

private:
    std::vector<std::string> wordpiece(const std::string &word) const;

    Vocabulary vocab_;
    TokenizerStyle style_;
};

// Lowercased words and single punctuation marks, the pre-tokenization shared by
// both tokenizer styles.
std::vector<std::string> basic_split(std::string_view text);

enum class TextBackend { Pretrained, Toy };

std::string_view to_string(TextBackend backend);
TextBackend text_backend_from_string(std::string_view name);

struct ToyTextConfig {
    std::int64_t vocab_size = 0;
    int channels = 64;
    int layers = 2;
    int heads = 4;
    int max_tokens = kDefaultMaxTokens;
};

// Sinusoidal position table [T, C].
torch::Tensor sinusoidal_positions(int tokens, int channels);

class ToyTextBlockImpl : public torch::nn::Module {
public:
    ToyTextBlockImpl(int channels, int heads);

    // x: [T, B, C]; padding: [B, T] true at padded positions.
    torch::Tensor forward(torch::Tensor x, const torch::Tensor &padding);

private:
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::MultiheadAttention attn_{nullptr};
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ToyTextBlock);

// Learned token embedding + sinusoidal positions + self-attention blocks.
class ToyTextEncoderImpl : public torch::nn::Module {
public:
    explicit ToyTextEncoderImpl(const ToyTextConfig &cfg);

    TextFeatures forward(const TokenBatch &tokens);

    const ToyTextConfig &config() const { return cfg_; }

private:
    ToyTextConfig cfg_;
    torch::nn::Embedding embedding_{nullptr};
    torch::nn::ModuleList blocks_{nullptr};
    torch::nn::LayerNorm final_norm_{nullptr};
    torch::Tensor positions_;
};
TORCH_MODULE(ToyTextEncoder);

// TorchScript BERT exported with forward(input_ids, attention_mask) returning
// the last hidden state [B, T, 768] (or a tuple whose first element is it).
// The directory must contain `model.pt` and `vocab.txt`.
class PretrainedTextEncoder {
public:
    static constexpr int kHiddenSize = 768;

    // Throws BackendUnavailable if the directory or its files cannot be loaded.
    static std::shared_ptr<PretrainedTextEncoder> load(const std::filesystem::path &dir);

    TextFeatures encode(const TokenBatch &tokens);

    const Tokenizer &tokenizer() const { return tokenizer_; }
    torch::jit::Module &module() { return module_; }
    std::vector<torch::Tensor> parameters();
    void set_trainable(bool trainable);
    const std::filesystem::path &source() const { return source_; }

private:
    PretrainedTextEncoder(torch::jit::Module module, Tokenizer tokenizer, std::filesystem::path source)
        : module_(std::move(module)), tokenizer_(std::move(tokenizer)), source_(std::move(source)) {}

    torch::jit::Module module_;
    Tokenizer tokenizer_;
    std::filesystem::path source_;
};

}  // namespace lsms
