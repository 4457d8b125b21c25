#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsms/image_io.hpp"

namespace lsms {

enum class LesionShape { Ellipse, Blob };
enum class Boundary { Sharp, Fuzzy };

struct LesionSpec {
    LesionShape shape = LesionShape::Ellipse;
    double center_row = 0.0;
    double center_col = 0.0;
    double axis_a = 5.0;  // along the rotated x axis, pixels
    double axis_b = 5.0;
    double angle = 0.0;   // radians
    double intensity = 0.2;
    Boundary boundary = Boundary::Sharp;
    // Blob outline perturbation r(t) = 1 + a1 sin(3t + p1) + a2 sin(5t + p2).
    std::array<double, 4> harmonics{0.0, 0.0, 0.0, 0.0};

    bool low_density() const { return intensity < 0.5; }
    // Normalised radial coordinate; <= 1 inside the lesion.
    double radial(double row, double col) const;
    // Largest distance from the centre to the outline.
    double extent() const;
};

// 0/1 rasterisation of one lesion (pixel centres at +0.5).
Image8 rasterize(const LesionSpec &lesion, int height, int width);
std::size_t lesion_area(const LesionSpec &lesion, int height, int width);

struct ReferringSample {
    std::string id;
    Image8 image;  // 3 x H x W
    std::string expression;
    Image8 mask;  // 1 x H x W, 0/1
    int target_index = -1;
    std::vector<LesionSpec> lesions;
    std::uint64_t seed = 0;
    bool disambiguation = false;
};

struct GenConfig {
    int image_size = 96;
    int min_lesions = 2;
    int max_lesions = 5;
    double min_axis = 5.0;
    double max_axis = 12.0;
    // Probability that a sample contains visually identical twins which only
    // the position clause separates.
    double disambiguation_rate = 0.0;
    int max_retries = 100;
    double noise_sigma = 0.025;
    // Area ratio required before "largest"/"smallest" may be used.
    double size_margin = 1.4;
    // Lesion centres keep this distance from the image midlines.
    double midline_margin = 6.0;

    void validate() const;
};

void to_json(nlohmann::json &j, const GenConfig &c);
void from_json(const nlohmann::json &j, GenConfig &c);
void to_json(nlohmann::json &j, const LesionSpec &l);
void from_json(const nlohmann::json &j, LesionSpec &l);

// Attribute clauses of the closed referring grammar.
enum class Attribute { Horizontal, Vertical, Quadrant, Shape, Boundary, Density, Size };

struct Clause {
    Attribute attribute;
    // Horizontal: 0 left, 1 right. Vertical: 0 upper, 1 lower. Quadrant:
    // 2 * vertical + horizontal. Shape: 0 round, 1 irregular. Boundary: 0
    // clear, 1 blurred. Density: 0 low, 1 high. Size: 0 largest, 1 smallest.
    int value;
    std::string text;
};

// Splits "the <noun> c1, c2, ..." into its head and clause strings.
struct ParsedExpression {
    std::string head;
    std::vector<std::string> clauses;
};
ParsedExpression split_expression(const std::string &expression);
std::string join_expression(const ParsedExpression &parsed);

// Keyword interpretation of one clause; nullopt if it names no attribute.
std::optional<Clause> interpret_clause(const std::string &text);

// Brute-force filter: indices of all lesions satisfying every clause of the
// expression. Superlatives compare rasterised areas over all lesions.
std::vector<int> resolve(const std::string &expression, const std::vector<LesionSpec> &lesions, int height,
                         int width);

ReferringSample generate_sample(std::uint64_t seed, const GenConfig &cfg);

// Rewrites position words for a mirrored image: left/right when `horizontal`,
// upper/lower and top/bottom when `vertical`. Other words are kept verbatim.
std::string mirror_expression(const std::string &expression, bool horizontal, bool vertical);

// Per-sample seed derived from (master seed, split, index).
std::uint64_t derive_seed(std::uint64_t master_seed, const std::string &split, std::uint64_t index);

// Keeps floor(fraction * n) clauses (at least one) while retaining a minimal
// clause set that still resolves uniquely. fraction >= 1 is the identity.
std::string partial_text(const ReferringSample &sample, double fraction);

struct ManifestRecord {
    std::string image;  // relative to the split directory
    std::string mask;
    std::string expression;
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::string split;
    std::vector<ManifestRecord> records;
};

// root/{split}/images/*.png, root/{split}/masks/*.png, root/{split}/annotations.jsonl
DatasetManifest write_dataset(const std::filesystem::path &root, const std::string &split, int count,
                              std::uint64_t master_seed, const GenConfig &cfg);
DatasetManifest write_samples(const std::filesystem::path &root, const std::string &split,
                              const std::vector<ReferringSample> &samples);

// Throws MissingFile (naming the record) or MalformedRecord.
std::vector<ReferringSample> load_dataset(const std::filesystem::path &root, const std::string &split);

std::vector<ReferringSample> generate_split(std::uint64_t master_seed, const std::string &split, int count,
                                            const GenConfig &cfg);

// Seeded 90/10 style partition of samples into (train, val).
std::pair<std::vector<ReferringSample>, std::vector<ReferringSample>> split_train_val(
    std::vector<ReferringSample> samples, double val_fraction, std::uint64_t seed);

}  // namespace lsms
