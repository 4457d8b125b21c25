#include "lsms/budget.hpp"

#include <iomanip>
#include <sstream>

namespace lsms {

namespace {

using I = std::int64_t;

struct Counter {
    BudgetEntry entry;

    // k_h x k_w convolution over an output of `pixels` positions.
    void conv(I in, I out, I kh, I kw, I pixels, I groups = 1, bool bias = true) {
        const I weights = kh * kw * (in / groups) * out;
        entry.params += weights + (bias ? out : 0);
        entry.macs += weights * pixels;
    }
    void norm(I channels, bool affine = true) { entry.params += affine ? 2 * channels : 0; }
    void matmul(I m, I n, I k) { entry.macs += m * n * k; }
};

BudgetEntry svla_block(const ModelConfig &cfg, int stage, I pixels, I tokens) {
    const auto s = cfg.svla(stage);
    const I c = s.channels;
    Counter k{{"stage" + std::to_string(stage + 1) + " block", 0, 0}};
    k.conv(c, c, 5, 5, pixels, c);
    for (int d : s.kernel_sizes) {
        k.conv(c, c, 1, d, pixels, c);
        k.conv(c, c, d, 1, pixels, c);
    }
    if (s.language_branch) {
        for (int i = 0; i < 3; ++i) k.conv(c, c, 1, 1, pixels);  // v1, v2, f (instance norm has no parameters)
        k.conv(s.text_channels, c, 1, 1, tokens);                 // l1
        k.conv(s.text_channels, c, 1, 1, tokens);                 // l2
        k.matmul(pixels, tokens, c);                              // alpha
        k.matmul(pixels, c, tokens);                              // weights * l2^T
    }
    k.conv(c, c, 1, 1, pixels);  // gate
    k.norm(c);
    const I hidden = c * cfg.ffn_expansion;
    k.conv(c, hidden, 1, 1, pixels);
    k.conv(hidden, hidden, 3, 3, pixels, hidden);
    k.conv(hidden, c, 1, 1, pixels);
    k.norm(c);
    return k.entry;
}

// Multiplicative-update NMF on a [C, P] matrix at rank R.
I nmf_macs(I c, I p, I r, int iters) {
    const I coef_update = p * c * r + c * r * r + p * r * r;
    const I bases_update = c * p * r + p * r * r + c * r * r;
    return p * c * r + iters * (coef_update + bases_update) + coef_update + c * p * r;
}

BudgetEntry decoder_entry(const ModelConfig &cfg) {
    const auto &d = cfg.decoder;
    const I pixels = static_cast<I>(cfg.stage_height(0)) * cfg.stage_width(0);
    const I s = d.squeeze_channels;
    Counter k{{"decoder", 0, 0}};
    if (d.variant == DecoderVariant::NoFsd) {
        k.conv(cfg.stage_channels[3], d.num_classes, 1, 1, pixels);
        return k.entry;
    }
    I concat = 0;
    const bool stage_mlp = d.variant == DecoderVariant::MlpConcat || d.variant == DecoderVariant::MlpConcatHead;
    for (int st : d.use_stages) {
        if (stage_mlp) {
            k.conv(cfg.stage_channels[st - 1], s, 1, 1, pixels);
            concat += s;
        } else {
            concat += cfg.stage_channels[st - 1];
        }
    }
    if (d.variant == DecoderVariant::MlpConcat) {
        k.conv(concat, s, 1, 1, pixels, 1, false);
        k.norm(s);
    } else {
        k.conv(concat, s, 1, 1, pixels, 1, false);  // squeeze
        k.norm(s);
        k.conv(s, s, 1, 1, pixels);                 // ham_in
        k.entry.macs += nmf_macs(s, pixels, d.nmf_rank, d.nmf_iters);
        k.conv(s, s, 1, 1, pixels, 1, false);       // ham_out
        k.norm(s);
        k.conv(s, s, 1, 1, pixels, 1, false);       // align
        k.norm(s);
    }
    k.conv(s, d.num_classes, 1, 1, pixels);
    return k.entry;
}

BudgetEntry text_entry(const ModelConfig &cfg) {
    const I t = cfg.max_tokens;
    Counter k{{"text encoder", 0, 0}};
    if (cfg.text_backend == TextBackend::Pretrained) {
        // BERT-base: 30522-word vocabulary, 512 positions, 2 segment types,
        // 12 layers of width 768 with 3072-wide feed-forward, plus pooler.
        const I h = 768, f = 3072, layers = 12;
        k.entry.params += (30522 + 512 + 2) * h + 2 * h;
        for (I l = 0; l < layers; ++l) {
            k.entry.params += 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
            k.entry.macs += 4 * t * h * h + 2 * t * t * h + 2 * t * h * f;
        }
        k.entry.params += h * h + h;
        return k.entry;
    }
    const I c = cfg.text_channels;
    const I vocab = static_cast<I>(Vocabulary::builtin().size());
    k.entry.params += vocab * c;
    for (int l = 0; l < cfg.toy_text_layers; ++l) {
        k.entry.params += 2 * c + 4 * (c * c + c) + 2 * c + (c * 2 * c + 2 * c) + (2 * c * c + c);
        k.entry.macs += 4 * t * c * c + 2 * t * t * c + 4 * t * c * c;
    }
    k.entry.params += 2 * c;
    return k.entry;
}

}  // namespace

std::int64_t BudgetReport::params() const {
    I sum = 0;
    for (const auto &e : entries) sum += e.params;
    return sum;
}

std::int64_t BudgetReport::macs() const {
    I sum = 0;
    for (const auto &e : entries) sum += e.macs;
    return sum;
}

std::string BudgetReport::table() const {
    std::ostringstream out;
    out << "# FLOPs = 2 x multiply-accumulates; norms, activations and interpolation excluded\n";
    out << std::left << std::setw(20) << "component" << std::right << std::setw(14) << "params" << std::setw(16)
        << "GFLOPs" << "\n";
    out << std::fixed;
    for (const auto &e : entries) {
        out << std::left << std::setw(20) << e.name << std::right << std::setw(14) << e.params << std::setw(16)
            << std::setprecision(3) << 2.0 * static_cast<double>(e.macs) / 1e9 << "\n";
    }
    out << std::left << std::setw(20) << "total" << std::right << std::setw(14) << params() << std::setw(16)
        << std::setprecision(3) << static_cast<double>(flops()) / 1e9 << "\n";
    out << std::setprecision(2) << "params " << static_cast<double>(params()) / 1e6 << " M (reference "
        << kReferenceParamsM << " M), FLOPs " << static_cast<double>(flops()) / 1e9 << " G (reference "
        << kReferenceFlopsG << " G)" << (include_text_encoder ? ", text encoder included" : ", text encoder excluded")
        << "\n";
    return out.str();
}

BudgetReport count_params_flops(const ModelConfig &cfg, bool include_text_encoder) {
    cfg.validate();
    BudgetReport report;
    report.include_text_encoder = include_text_encoder;
    const I tokens = cfg.max_tokens;

    Counter embed{{"embedding", 0, 0}};
    const I c1 = cfg.stage_channels[0];
    const I mid = std::max<I>(1, c1 / 2);
    const I half = static_cast<I>(cfg.image_height / 2) * (cfg.image_width / 2);
    embed.conv(3, mid, 3, 3, half);
    embed.norm(mid);
    embed.conv(mid, c1, 3, 3, static_cast<I>(cfg.stage_height(0)) * cfg.stage_width(0));
    embed.norm(c1);
    report.entries.push_back(embed.entry);

    for (int s = 0; s < 4; ++s) {
        const I pixels = static_cast<I>(cfg.stage_height(s)) * cfg.stage_width(s);
        BudgetEntry stage{"stage" + std::to_string(s + 1), 0, 0};
        if (s > 0) {
            Counter down{{}};
            down.conv(cfg.stage_channels[s - 1], cfg.stage_channels[s], 3, 3, pixels);
            down.norm(cfg.stage_channels[s]);
            stage.params += down.entry.params;
            stage.macs += down.entry.macs;
        }
        const auto block = svla_block(cfg, s, pixels, tokens);
        stage.params += block.params * cfg.stage_blocks[s];
        stage.macs += block.macs * cfg.stage_blocks[s];
        report.entries.push_back(stage);
    }
    report.entries.push_back(decoder_entry(cfg));
    if (include_text_encoder) report.entries.push_back(text_entry(cfg));
    return report;
}

}  // namespace lsms
