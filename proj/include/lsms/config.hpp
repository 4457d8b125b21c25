#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lsms/svla.hpp"
#include "lsms/text_encoder.hpp"

namespace lsms {

// Decoder arrangements compared in the decoder-design ablation. "MLP" is a
// 1x1 convolution; "Head" is the squeeze + NMF InterScale block.
enum class DecoderVariant {
    ConcatHead,     // Concat -> Head -> MLP (default)
    MlpConcat,      // per-stage MLP -> Concat -> MLP
    MlpConcatHead,  // per-stage MLP -> Concat -> Head -> MLP
    NoFsd,          // segmentation head directly on the aligned last stage
};

std::string_view to_string(DecoderVariant v);
DecoderVariant decoder_variant_from_string(std::string_view name);

enum class NormKind { Batch, Layer };

std::string_view to_string(NormKind n);
NormKind norm_kind_from_string(std::string_view name);

struct DecoderConfig {
    std::set<int> use_stages{2, 3, 4};  // 1-based stage indices
    int squeeze_channels = 256;
    int nmf_rank = 64;
    int nmf_iters = 6;
    int num_classes = 1;
    DecoderVariant variant = DecoderVariant::ConcatHead;
    bool running_bases = false;
    std::uint64_t nmf_seed = 0x5eed;

    void validate() const;
};

struct ModelConfig {
    std::array<int, 4> stage_blocks{3, 3, 5, 2};
    std::array<int, 4> stage_channels{64, 128, 320, 512};
    int image_height = 480;
    int image_width = 480;
    std::vector<int> kernel_sizes{7, 11, 21};
    bool pixel_map = true;
    bool language_branch = true;
    double softmax_temperature = 0.0;  // <= 0: sqrt(text_channels)
    int ffn_expansion = 4;
    NormKind norm = NormKind::Batch;

    TextBackend text_backend = TextBackend::Pretrained;
    int text_channels = PretrainedTextEncoder::kHiddenSize;
    std::string pretrained_path;
    int toy_text_layers = 2;
    int toy_text_heads = 4;
    int max_tokens = kDefaultMaxTokens;
    bool freeze_text = false;

    DecoderConfig decoder;

    // Stage geometry and widths as published, BERT text features.
    static ModelConfig full();
    // Desk-scale configuration used by the synthetic benchmark.
    static ModelConfig toy();

    SvlaConfig svla(int stage) const;  // 0-based stage
    int stage_height(int stage) const { return image_height >> (stage + 2); }
    int stage_width(int stage) const { return image_width >> (stage + 2); }
    void validate() const;

    std::string hash() const;
};

void to_json(nlohmann::json &j, const DecoderConfig &c);
void from_json(const nlohmann::json &j, DecoderConfig &c);
void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

// Flat `key = value` text files, '#' comments. Used for both model and
// training configuration files.
using KeyValues = std::vector<std::pair<std::string, std::string>>;
KeyValues read_key_values(const std::string &path);
void apply_key_values(ModelConfig &cfg, const KeyValues &kv, std::vector<std::string> *unused = nullptr);

std::string hex_digest(std::string_view data);

}  // namespace lsms
