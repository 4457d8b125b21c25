#include "lsms/config.hpp"

#include <fstream>
#include <sstream>

#include "lsms/errors.hpp"

namespace lsms {

namespace {

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

template <std::size_t N>
std::array<int, N> parse_int_array(const std::string &value) {
    std::array<int, N> out{};
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= N) throw Error(ErrorCode::InvalidConfig, "too many entries in '" + value + "'");
        out[i++] = std::stoi(trim(item));
    }
    if (i != N) throw Error(ErrorCode::InvalidConfig, "expected " + std::to_string(N) + " entries in '" + value + "'");
    return out;
}

std::vector<int> parse_int_list(const std::string &value) {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

bool parse_bool(const std::string &value) {
    if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
    if (value == "0" || value == "false" || value == "no" || value == "off") return false;
    throw Error(ErrorCode::InvalidConfig, "not a boolean: '" + value + "'");
}

}  // namespace

std::string_view to_string(DecoderVariant v) {
    switch (v) {
    case DecoderVariant::ConcatHead: return "concat-head-mlp";
    case DecoderVariant::MlpConcat: return "mlp-concat-mlp";
    case DecoderVariant::MlpConcatHead: return "mlp-concat-head-mlp";
    case DecoderVariant::NoFsd: return "none";
    }
    return "concat-head-mlp";
}

DecoderVariant decoder_variant_from_string(std::string_view name) {
    for (auto v : {DecoderVariant::ConcatHead, DecoderVariant::MlpConcat, DecoderVariant::MlpConcatHead,
                   DecoderVariant::NoFsd}) {
        if (to_string(v) == name) return v;
    }
    throw Error(ErrorCode::InvalidConfig, "unknown decoder variant '" + std::string(name) + "'");
}

std::string_view to_string(NormKind n) { return n == NormKind::Batch ? "batch" : "layer"; }

NormKind norm_kind_from_string(std::string_view name) {
    if (name == "batch") return NormKind::Batch;
    if (name == "layer") return NormKind::Layer;
    throw Error(ErrorCode::InvalidConfig, "unknown norm '" + std::string(name) + "'");
}

void DecoderConfig::validate() const {
    if (use_stages.empty()) throw Error(ErrorCode::InvalidConfig, "decoder needs at least one stage");
    for (int s : use_stages) {
        if (s < 1 || s > 4) throw Error(ErrorCode::InvalidConfig, "decoder stage indices are 1..4");
    }
    if (nmf_rank < 1 || nmf_iters < 1) throw Error(ErrorCode::InvalidConfig, "NMF rank and iterations must be >= 1");
    if (squeeze_channels < 1 || num_classes < 1) throw Error(ErrorCode::InvalidConfig, "decoder widths must be positive");
}

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.stage_blocks = {1, 1, 2, 1};
    c.stage_channels = {16, 32, 64, 96};
    c.image_height = 96;
    c.image_width = 96;
    c.text_backend = TextBackend::Toy;
    c.text_channels = 64;
    c.decoder.squeeze_channels = 64;
    c.decoder.nmf_rank = 16;
    c.max_tokens = 32;
    return c;
}

SvlaConfig ModelConfig::svla(int stage) const {
    SvlaConfig s;
    s.kernel_sizes = kernel_sizes;
    s.channels = stage_channels.at(stage);
    s.text_channels = text_channels;
    s.pixel_map = pixel_map;
    s.language_branch = language_branch;
    s.temperature = softmax_temperature;
    return s;
}

void ModelConfig::validate() const {
    for (int i = 0; i < 4; ++i) {
        if (stage_blocks[i] < 1) throw Error(ErrorCode::InvalidConfig, "every stage needs at least one block");
        if (stage_channels[i] < 1) throw Error(ErrorCode::InvalidConfig, "stage channels must be positive");
        if (i > 0 && stage_channels[i] <= stage_channels[i - 1]) {
            throw Error(ErrorCode::InvalidConfig, "stage channels must strictly increase");
        }
    }
    if (image_height <= 0 || image_width <= 0 || image_height % 32 != 0 || image_width % 32 != 0) {
        throw Error(ErrorCode::InvalidConfig, "image size must be positive and divisible by 32");
    }
    if (ffn_expansion < 1) throw Error(ErrorCode::InvalidConfig, "ffn_expansion must be >= 1");
    if (text_channels < 1 || max_tokens < 1) throw Error(ErrorCode::InvalidConfig, "text settings must be positive");
    if (text_backend == TextBackend::Pretrained && text_channels != PretrainedTextEncoder::kHiddenSize) {
        throw Error(ErrorCode::InvalidConfig, "the pretrained backend produces 768 channels");
    }
    svla(0).validate();
    decoder.validate();
}

std::string ModelConfig::hash() const {
    nlohmann::json j = *this;
    return hex_digest(j.dump());
}

void to_json(nlohmann::json &j, const DecoderConfig &c) {
    j = nlohmann::json{{"use_stages", std::vector<int>(c.use_stages.begin(), c.use_stages.end())},
                       {"squeeze_channels", c.squeeze_channels},
                       {"nmf_rank", c.nmf_rank},
                       {"nmf_iters", c.nmf_iters},
                       {"num_classes", c.num_classes},
                       {"variant", std::string(to_string(c.variant))},
                       {"running_bases", c.running_bases},
                       {"nmf_seed", c.nmf_seed}};
}

void from_json(const nlohmann::json &j, DecoderConfig &c) {
    auto stages = j.at("use_stages").get<std::vector<int>>();
    c.use_stages = std::set<int>(stages.begin(), stages.end());
    c.squeeze_channels = j.at("squeeze_channels").get<int>();
    c.nmf_rank = j.at("nmf_rank").get<int>();
    c.nmf_iters = j.at("nmf_iters").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.variant = decoder_variant_from_string(j.at("variant").get<std::string>());
    c.running_bases = j.value("running_bases", false);
    c.nmf_seed = j.value("nmf_seed", std::uint64_t{0x5eed});
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
    j = nlohmann::json{{"stage_blocks", c.stage_blocks},
                       {"stage_channels", c.stage_channels},
                       {"image_height", c.image_height},
                       {"image_width", c.image_width},
                       {"kernel_sizes", c.kernel_sizes},
                       {"pixel_map", c.pixel_map},
                       {"language_branch", c.language_branch},
                       {"softmax_temperature", c.softmax_temperature},
                       {"ffn_expansion", c.ffn_expansion},
                       {"norm", std::string(to_string(c.norm))},
                       {"text_backend", std::string(to_string(c.text_backend))},
                       {"text_channels", c.text_channels},
                       {"pretrained_path", c.pretrained_path},
                       {"toy_text_layers", c.toy_text_layers},
                       {"toy_text_heads", c.toy_text_heads},
                       {"max_tokens", c.max_tokens},
                       {"freeze_text", c.freeze_text},
                       {"decoder", c.decoder}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
    c.stage_blocks = j.at("stage_blocks").get<std::array<int, 4>>();
    c.stage_channels = j.at("stage_channels").get<std::array<int, 4>>();
    c.image_height = j.at("image_height").get<int>();
    c.image_width = j.at("image_width").get<int>();
    c.kernel_sizes = j.at("kernel_sizes").get<std::vector<int>>();
    c.pixel_map = j.at("pixel_map").get<bool>();
    c.language_branch = j.value("language_branch", true);
    c.softmax_temperature = j.at("softmax_temperature").get<double>();
    c.ffn_expansion = j.at("ffn_expansion").get<int>();
    c.norm = norm_kind_from_string(j.at("norm").get<std::string>());
    c.text_backend = text_backend_from_string(j.at("text_backend").get<std::string>());
    c.text_channels = j.at("text_channels").get<int>();
    c.pretrained_path = j.value("pretrained_path", std::string{});
    c.toy_text_layers = j.at("toy_text_layers").get<int>();
    c.toy_text_heads = j.at("toy_text_heads").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    c.freeze_text = j.value("freeze_text", false);
    c.decoder = j.at("decoder").get<DecoderConfig>();
}

KeyValues read_key_values(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, "cannot open config file " + path);
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::InvalidConfig, path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
}

void apply_key_values(ModelConfig &cfg, const KeyValues &kv, std::vector<std::string> *unused) {
    for (const auto &[key, value] : kv) {
        if (key == "preset") {
            if (value == "full") cfg = ModelConfig::full();
            else if (value == "toy") cfg = ModelConfig::toy();
            else throw Error(ErrorCode::InvalidConfig, "unknown preset '" + value + "'");
        } else if (key == "stage_blocks") {
            cfg.stage_blocks = parse_int_array<4>(value);
        } else if (key == "stage_channels") {
            cfg.stage_channels = parse_int_array<4>(value);
        } else if (key == "image_size") {
            cfg.image_height = cfg.image_width = std::stoi(value);
        } else if (key == "image_height") {
            cfg.image_height = std::stoi(value);
        } else if (key == "image_width") {
            cfg.image_width = std::stoi(value);
        } else if (key == "kernel_sizes") {
            cfg.kernel_sizes = parse_int_list(value);
        } else if (key == "pixel_map") {
            cfg.pixel_map = parse_bool(value);
        } else if (key == "language_branch") {
            cfg.language_branch = parse_bool(value);
        } else if (key == "softmax_temperature") {
            cfg.softmax_temperature = std::stod(value);
        } else if (key == "ffn_expansion") {
            cfg.ffn_expansion = std::stoi(value);
        } else if (key == "norm") {
            cfg.norm = norm_kind_from_string(value);
        } else if (key == "text_backend") {
            cfg.text_backend = text_backend_from_string(value);
        } else if (key == "text_channels") {
            cfg.text_channels = std::stoi(value);
        } else if (key == "pretrained_path") {
            cfg.pretrained_path = value;
        } else if (key == "toy_text_layers") {
            cfg.toy_text_layers = std::stoi(value);
        } else if (key == "toy_text_heads") {
            cfg.toy_text_heads = std::stoi(value);
        } else if (key == "max_tokens") {
            cfg.max_tokens = std::stoi(value);
        } else if (key == "freeze_text") {
            cfg.freeze_text = parse_bool(value);
        } else if (key == "decoder.use_stages") {
            auto stages = parse_int_list(value);
            cfg.decoder.use_stages = std::set<int>(stages.begin(), stages.end());
        } else if (key == "decoder.squeeze_channels") {
            cfg.decoder.squeeze_channels = std::stoi(value);
        } else if (key == "decoder.nmf_rank") {
            cfg.decoder.nmf_rank = std::stoi(value);
        } else if (key == "decoder.nmf_iters") {
            cfg.decoder.nmf_iters = std::stoi(value);
        } else if (key == "decoder.variant") {
            cfg.decoder.variant = decoder_variant_from_string(value);
        } else if (key == "decoder.running_bases") {
            cfg.decoder.running_bases = parse_bool(value);
        } else if (unused) {
            unused->push_back(key);
        }
    }
}

std::string hex_digest(std::string_view data) {
    // FNV-1a, 64 bit. Used for config and checkpoint identifiers only.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << h;
    return out.str();
}

}  // namespace lsms
