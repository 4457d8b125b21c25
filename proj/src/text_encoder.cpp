#include "lsms/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};

// Closed vocabulary of the synthetic referring grammar plus a few anatomical
// words so hand-typed queries are not all [UNK].
const std::vector<std::string> kBuiltinWords = {
    ",",        "the",       "a",          "an",        "of",        "and",       "in",
    "on",       "with",      "one",        "lesion",    "nodule",    "mass",      "tumor",
    "left",     "right",     "upper",      "top",       "lower",     "bottom",    "part",
    "side",     "half",      "region",     "round",     "oval",      "irregular", "lobulated",
    "shape",    "clear",     "sharp",      "well",      "ill",       "defined",   "blurred",
    "fuzzy",    "boundary",  "margin",     "low",       "high",      "density",   "hypodense",
    "hyperdense", "dark",    "bright",     "largest",   "biggest",   "smallest",  "tiniest",
    "size",     "image",     "liver",      "lobe",      "segment",   "located",   "is",
    "that",     "which",     "area",       "lung",
};

bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

}  // namespace

int TokenSequence::valid_count() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), true));
}

TokenBatch TokenBatch::from(const std::vector<TokenSequence> &sequences) {
    TORCH_CHECK(!sequences.empty(), "TokenBatch::from needs at least one sequence");
    const auto batch = static_cast<int64_t>(sequences.size());
    const int64_t tokens = sequences.front().length();
    auto ids = torch::empty({batch, tokens}, torch::kInt64);
    auto valid = torch::empty({batch, tokens}, torch::kBool);
    auto ids_a = ids.accessor<int64_t, 2>();
    auto valid_a = valid.accessor<bool, 2>();
    for (int64_t b = 0; b < batch; ++b) {
        const auto &seq = sequences[b];
        if (seq.length() != tokens) {
            throw Error(ErrorCode::ShapeMismatch, "token sequences in a batch must share one length");
        }
        for (int64_t t = 0; t < tokens; ++t) {
            ids_a[b][t] = seq.ids[t];
            valid_a[b][t] = seq.valid[t];
        }
    }
    return {ids, valid};
}

Vocabulary Vocabulary::builtin() {
    std::vector<std::string> tokens = kSpecials;
    tokens.insert(tokens.end(), kBuiltinWords.begin(), kBuiltinWords.end());
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        v.index_.emplace(v.tokens_[i], static_cast<std::int64_t>(i));
    }
    auto lookup = [&](const std::string &name, std::int64_t fallback) {
        auto it = v.index_.find(name);
        return it == v.index_.end() ? fallback : it->second;
    };
    if (lookup("[PAD]", -1) != kPadId) {
        throw Error(ErrorCode::InvalidConfig, "vocabulary must start with [PAD]");
    }
    v.unk_id_ = lookup("[UNK]", 1);
    v.cls_id_ = lookup("[CLS]", 2);
    v.sep_id_ = lookup("[SEP]", 3);
    return v;
}

Vocabulary Vocabulary::from_file(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::MissingFile, "cannot open vocabulary " + path.string());
    }
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path &path) const {
    std::ofstream out(path);
    for (const auto &t : tokens_) out << t << '\n';
}

std::int64_t Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? unk_id_ : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::vector<std::string> basic_split(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            words.push_back(current);
            current.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (is_punct(c) && c != '-') {
            flush();
            words.emplace_back(1, static_cast<char>(c));
        } else if (c == '-') {
            // "well-defined" splits into two words
            flush();
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return words;
}

std::vector<std::string> Tokenizer::wordpiece(const std::string &word) const {
    std::vector<std::string> pieces;
    std::size_t start = 0;
    while (start < word.size()) {
        std::size_t end = word.size();
        std::string found;
        while (end > start) {
            std::string piece = word.substr(start, end - start);
            if (start > 0) piece = "##" + piece;
            if (vocab_.contains(piece)) {
                found = piece;
                break;
            }
            --end;
        }
        if (found.empty()) return {"[UNK]"};
        pieces.push_back(found);
        start = end;
    }
    return pieces;
}

TokenSequence Tokenizer::tokenize(std::string_view expression, int max_tokens) const {
    if (max_tokens <= 0) {
        throw Error(ErrorCode::InvalidConfig, "max_tokens must be positive");
    }
    const auto words = basic_split(expression);
    if (words.empty()) {
        throw Error(ErrorCode::EmptyExpression, "referring expression is empty");
    }

    std::vector<std::int64_t> content;
    for (const auto &w : words) {
        if (style_ == TokenizerStyle::WordPiece) {
            for (const auto &p : wordpiece(w)) content.push_back(vocab_.id(p));
        } else {
            content.push_back(vocab_.id(w));
        }
    }

    const bool specials = style_ == TokenizerStyle::WordPiece;
    const int budget = specials ? std::max(0, max_tokens - 2) : max_tokens;
    if (static_cast<int>(content.size()) > budget) {
        std::cerr << "[lsms] warning: expression truncated from " << content.size() << " to " << budget
                  << " tokens\n";
        content.resize(budget);
    }

    TokenSequence seq;
    seq.raw_text = std::string(expression);
    if (specials) seq.ids.push_back(vocab_.cls_id());
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    if (specials && static_cast<int>(seq.ids.size()) < max_tokens) seq.ids.push_back(vocab_.sep_id());
    seq.valid.assign(seq.ids.size(), true);
    seq.ids.resize(max_tokens, kPadId);
    seq.valid.resize(max_tokens, false);
    return seq;
}

std::string_view to_string(TextBackend backend) {
    return backend == TextBackend::Pretrained ? "pretrained" : "toy";
}

TextBackend text_backend_from_string(std::string_view name) {
    if (name == "pretrained") return TextBackend::Pretrained;
    if (name == "toy") return TextBackend::Toy;
    throw Error(ErrorCode::InvalidConfig, "unknown text backend '" + std::string(name) + "'");
}

torch::Tensor sinusoidal_positions(int tokens, int channels) {
    auto table = torch::zeros({tokens, channels}, torch::kFloat64);
    auto a = table.accessor<double, 2>();
    for (int t = 0; t < tokens; ++t) {
        for (int c = 0; c < channels; ++c) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / channels);
            a[t][c] = (c % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
        }
    }
    return table.to(torch::kFloat32);
}

ToyTextBlockImpl::ToyTextBlockImpl(int channels, int heads) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    attn_ = register_module("attn", torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(channels, heads)));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    fc1_ = register_module("fc1", torch::nn::Linear(channels, 2 * channels));
    fc2_ = register_module("fc2", torch::nn::Linear(2 * channels, channels));
}

torch::Tensor ToyTextBlockImpl::forward(torch::Tensor x, const torch::Tensor &padding) {
    auto h = norm1_(x);
    auto attended = std::get<0>(attn_->forward(h, h, h, padding, /*need_weights=*/false));
    x = x + attended;
    x = x + fc2_(torch::gelu(fc1_(norm2_(x))));
    return x;
}

ToyTextEncoderImpl::ToyTextEncoderImpl(const ToyTextConfig &cfg) : cfg_(cfg) {
    if (cfg.vocab_size <= 0 || cfg.channels <= 0 || cfg.channels % cfg.heads != 0) {
        throw Error(ErrorCode::InvalidConfig, "toy text encoder needs a vocabulary and channels divisible by heads");
    }
    embedding_ = register_module(
        "embedding", torch::nn::Embedding(torch::nn::EmbeddingOptions(cfg.vocab_size, cfg.channels)));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < cfg.layers; ++i) blocks_->push_back(ToyTextBlock(cfg.channels, cfg.heads));
    final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.channels})));
    positions_ = register_buffer("positions", sinusoidal_positions(cfg.max_tokens, cfg.channels));
}

TextFeatures ToyTextEncoderImpl::forward(const TokenBatch &tokens) {
    const auto length = tokens.ids.size(1);
    if (length > positions_.size(0)) {
        throw Error(ErrorCode::ShapeMismatch, "token length exceeds the encoder's position table");
    }
    auto x = embedding_(tokens.ids) + positions_.narrow(0, 0, length).unsqueeze(0);
    auto padding = tokens.valid.logical_not();
    x = x.transpose(0, 1);  // [T, B, C]
    for (const auto &block : *blocks_) {
        x = block->as<ToyTextBlock>()->forward(x, padding);
    }
    x = final_norm_(x);
    return {x.permute({1, 2, 0}).contiguous(), tokens.valid};
}

std::shared_ptr<PretrainedTextEncoder> PretrainedTextEncoder::load(const std::filesystem::path &dir) {
    const auto model_path = dir / "model.pt";
    const auto vocab_path = dir / "vocab.txt";
    if (!std::filesystem::exists(model_path) || !std::filesystem::exists(vocab_path)) {
        throw Error(ErrorCode::BackendUnavailable,
                    "pretrained text encoder needs model.pt and vocab.txt in " + dir.string());
    }
    try {
        auto module = torch::jit::load(model_path.string());
        module.eval();
        Tokenizer tokenizer(Vocabulary::from_file(vocab_path), TokenizerStyle::WordPiece);
        return std::shared_ptr<PretrainedTextEncoder>(
            new PretrainedTextEncoder(std::move(module), std::move(tokenizer), dir));
    } catch (const c10::Error &e) {
        throw Error(ErrorCode::BackendUnavailable, std::string("failed to load TorchScript model: ") + e.what_without_backtrace());
    }
}

TextFeatures PretrainedTextEncoder::encode(const TokenBatch &tokens) {
    std::vector<torch::jit::IValue> inputs{tokens.ids, tokens.valid.to(torch::kInt64)};
    auto out = module_.forward(inputs);
    torch::Tensor hidden;
    if (out.isTensor()) {
        hidden = out.toTensor();
    } else if (out.isTuple()) {
        hidden = out.toTuple()->elements().at(0).toTensor();
    } else {
        throw Error(ErrorCode::BackendUnavailable, "pretrained text encoder returned an unsupported value");
    }
    if (hidden.dim() != 3 || hidden.size(2) != kHiddenSize) {
        throw Error(ErrorCode::ShapeMismatch, "pretrained text encoder must return [B, T, 768]");
    }
    return {hidden.transpose(1, 2).contiguous(), tokens.valid};
}

std::vector<torch::Tensor> PretrainedTextEncoder::parameters() {
    std::vector<torch::Tensor> params;
    for (const auto &p : module_.parameters()) params.push_back(p);
    return params;
}

void PretrainedTextEncoder::set_trainable(bool trainable) {
    for (auto p : module_.parameters()) p.set_requires_grad(trainable);
}

}  // namespace lsms
