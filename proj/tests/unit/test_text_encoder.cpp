#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "lsms/errors.hpp"
#include "lsms/model.hpp"
#include "lsms/text_encoder.hpp"

using namespace lsms;

namespace {

ErrorCode code_of(const std::function<void()> &f) {
    try {
        f();
    } catch (const Error &e) {
        return e.code();
    }
    ADD_FAILURE() << "no lsms::Error thrown";
    return ErrorCode::UsageError;
}

ToyTextEncoder make_toy(int channels = 64) {
    ToyTextConfig c;
    c.vocab_size = Vocabulary::builtin().size();
    c.channels = channels;
    return ToyTextEncoder(c);
}

std::filesystem::path tiny_bert_dir() {
    const char *dir = std::getenv("LSMS_TINY_BERT");
    return dir ? std::filesystem::path(dir) : std::filesystem::path();
}

}  // namespace

TEST(Tokenizer, PadsToFixedLength) {
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    const auto seq = tok.tokenize("largest lesion in the left lobe", 24);
    ASSERT_EQ(seq.length(), 24);
    EXPECT_EQ(seq.valid_count(), 6);
    for (int i = 6; i < 24; ++i) {
        EXPECT_FALSE(seq.valid[i]);
        EXPECT_EQ(seq.ids[i], kPadId);
    }
    EXPECT_EQ(seq.raw_text, "largest lesion in the left lobe");
}

TEST(Tokenizer, WordPieceAddsSpecials) {
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::WordPiece);
    const auto seq = tok.tokenize("largest lesion in the left lobe", 24);
    EXPECT_EQ(seq.valid_count(), 8);
    EXPECT_EQ(seq.ids[0], tok.vocab().cls_id());
    EXPECT_EQ(seq.ids[7], tok.vocab().sep_id());
}

TEST(Tokenizer, RejectsBlankExpressions) {
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    EXPECT_EQ(code_of([&] { tok.tokenize("", 24); }), ErrorCode::EmptyExpression);
    EXPECT_EQ(code_of([&] { tok.tokenize("  \t\n ", 24); }), ErrorCode::EmptyExpression);
}

TEST(Tokenizer, TruncatesLongExpressions) {
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    std::string text;
    for (int i = 0; i < 30; ++i) text += "lesion ";
    const auto seq = tok.tokenize(text, 24);
    EXPECT_EQ(seq.length(), 24);
    EXPECT_EQ(seq.valid_count(), 24);
}

TEST(Tokenizer, IsDeterministicAndMapsUnknownWords) {
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    const auto a = tok.tokenize("The LARGEST zorblat, on the left", 12);
    const auto b = tok.tokenize("The LARGEST zorblat, on the left", 12);
    EXPECT_EQ(a.ids, b.ids);
    EXPECT_EQ(a.ids[2], tok.vocab().unk_id());
    EXPECT_EQ(a.ids[3], tok.vocab().id(","));
}

TEST(Vocabulary, BuiltinIsClosedAndSmall) {
    const auto v = Vocabulary::builtin();
    EXPECT_GE(v.size(), 50);
    EXPECT_LE(v.size(), 80);
    EXPECT_EQ(v.id("[PAD]"), kPadId);
    for (const char *w : {"left", "right", "upper", "lower", "largest", "smallest", "round", "irregular", "boundary"}) {
        EXPECT_TRUE(v.contains(w)) << w;
    }
}

TEST(Vocabulary, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "lsms_vocab_test.txt";
    Vocabulary::builtin().save(path);
    const auto v = Vocabulary::from_file(path);
    EXPECT_EQ(v.tokens(), Vocabulary::builtin().tokens());
    std::filesystem::remove(path);
    EXPECT_EQ(code_of([&] { Vocabulary::from_file(path); }), ErrorCode::MissingFile);
}

TEST(ToyTextEncoder, OutputShapeAndMask) {
    auto enc = make_toy(64);
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    const auto batch = TokenBatch::from({tok.tokenize("the lesion on the left", 24)});
    const auto f = enc(batch);
    EXPECT_EQ(f.features.sizes(), torch::IntArrayRef({1, 64, 24}));
    EXPECT_TRUE(torch::equal(f.mask, batch.valid));
    EXPECT_TRUE(torch::isfinite(f.features).all().item<bool>());
}

TEST(ToyTextEncoder, IsBitwiseDeterministic) {
    auto enc = make_toy();
    enc->eval();
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    const auto batch = TokenBatch::from({tok.tokenize("the smallest nodule", 24)});
    EXPECT_TRUE(torch::equal(enc(batch).features, enc(batch).features));
}

TEST(ToyTextEncoder, PaddingIdsDoNotAffectValidColumns) {
    auto enc = make_toy();
    enc->eval();
    Tokenizer tok(Vocabulary::builtin(), TokenizerStyle::Word);
    auto batch = TokenBatch::from({tok.tokenize("the smallest nodule on the right", 24)});
    const auto a = enc(batch);
    batch.ids.slice(1, 6, 24).fill_(Vocabulary::builtin().id("left"));
    const auto b = enc(batch);
    EXPECT_TRUE(torch::equal(a.features.slice(2, 0, 6), b.features.slice(2, 0, 6)));
}

TEST(PretrainedTextEncoder, MissingDirectoryIsBackendUnavailable) {
    EXPECT_EQ(code_of([] { PretrainedTextEncoder::load("/nonexistent/bert"); }), ErrorCode::BackendUnavailable);
}

TEST(PretrainedTextEncoder, ModelWithoutWeightsCannotEncode) {
    auto cfg = ModelConfig::toy();
    cfg.text_backend = TextBackend::Pretrained;
    cfg.text_channels = 768;
    cfg.pretrained_path = "/nonexistent/bert";
    LsmsModel model(cfg);
    EXPECT_FALSE(model->has_text_encoder());
    EXPECT_EQ(code_of([&] { model->tokenize("the lesion"); }), ErrorCode::BackendUnavailable);
}

TEST(PretrainedTextEncoder, TinyExportHasHiddenSize768) {
    const auto dir = tiny_bert_dir();
    if (dir.empty() || !std::filesystem::exists(dir / "model.pt")) GTEST_SKIP() << "no TorchScript BERT fixture";
    auto enc = PretrainedTextEncoder::load(dir);
    const auto batch = TokenBatch::from({enc->tokenizer().tokenize("the largest lesion in the left part", 24)});
    const auto f = enc->encode(batch);
    EXPECT_EQ(f.features.sizes(), torch::IntArrayRef({1, 768, 24}));
    EXPECT_TRUE(torch::equal(f.mask, batch.valid));
    EXPECT_TRUE(torch::equal(enc->encode(batch).features, f.features));
}

TEST(PretrainedTextEncoder, PaddedIdsDoNotChangeSegmentationLogits) {
    const auto dir = tiny_bert_dir();
    if (dir.empty() || !std::filesystem::exists(dir / "model.pt")) GTEST_SKIP() << "no TorchScript BERT fixture";
    auto cfg = ModelConfig::toy();
    cfg.text_backend = TextBackend::Pretrained;
    cfg.text_channels = 768;
    cfg.max_tokens = 24;
    cfg.pretrained_path = dir.string();
    torch::manual_seed(2);
    LsmsModel model(cfg);
    ASSERT_TRUE(model->has_text_encoder());
    model->eval();
    torch::NoGradGuard g;
    auto tokens = model->tokenize(std::vector<std::string>{"the largest lesion in the left part"});
    const auto image = torch::rand({1, 3, 96, 96});
    const auto a = model->forward(image, tokens);
    const auto valid = tokens.valid.sum().item<std::int64_t>();
    tokens.ids.slice(1, valid, 24).fill_(7);
    EXPECT_TRUE(torch::equal(a, model->forward(image, tokens)));
}
