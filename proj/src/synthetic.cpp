#include "lsms/synthetic.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "lsms/errors.hpp"
#include "lsms/text_encoder.hpp"

namespace lsms {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Distribution code is written out so the generated bytes do not depend on
// the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() { return state_ = splitmix64(state_); }
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(uniform() * (hi - lo + 1));
    }
    bool bernoulli(double p) { return uniform() < p; }
    double normal() {
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }
    template <typename T>
    const T &pick(const std::vector<T> &items) {
        return items[static_cast<std::size_t>(uniform_int(0, static_cast<int>(items.size()) - 1))];
    }
    template <typename T>
    void shuffle(std::vector<T> &items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1))]);
        }
    }

private:
    std::uint64_t state_;
};

// --- grammar -------------------------------------------------------------

const std::vector<std::string> kHeads = {"the lesion", "the nodule", "the mass", "the tumor"};
const std::vector<std::string> kAreas = {"part", "side", "half", "region"};

std::string clause_text(Attribute attribute, int value, Rng &rng) {
    static const std::vector<std::string> left_right = {"left", "right"};
    static const std::vector<std::vector<std::string>> upper_lower = {{"upper", "top"}, {"lower", "bottom"}};
    switch (attribute) {
    case Attribute::Horizontal:
        return rng.pick(std::vector<std::string>{"in the ", "on the "}) + left_right[value] + " " + rng.pick(kAreas);
    case Attribute::Vertical:
        return "in the " + rng.pick(upper_lower[value]) + " " + rng.pick(kAreas);
    case Attribute::Quadrant:
        return "in the " + rng.pick(upper_lower[value / 2]) + " " + left_right[value % 2] + " " +
               rng.pick(std::vector<std::string>{"part", "region"});
    case Attribute::Shape:
        return value == 0 ? rng.pick(std::vector<std::string>{"with a round shape", "with an oval shape"})
                          : rng.pick(std::vector<std::string>{"with an irregular shape", "with a lobulated shape"});
    case Attribute::Boundary: {
        const auto noun = rng.pick(std::vector<std::string>{"boundary", "margin"});
        return value == 0 ? rng.pick(std::vector<std::string>{"with a clear ", "with a sharp ", "with a well defined "}) + noun
                          : rng.pick(std::vector<std::string>{"with a blurred ", "with a fuzzy ", "with an ill defined "}) + noun;
    }
    case Attribute::Density:
        return value == 0 ? rng.pick(std::vector<std::string>{"with low density", "hypodense", "dark"})
                          : rng.pick(std::vector<std::string>{"with high density", "hyperdense", "bright"});
    case Attribute::Size:
        return value == 0 ? rng.pick(std::vector<std::string>{"the largest one", "the biggest one", "largest in size"})
                          : rng.pick(std::vector<std::string>{"the smallest one", "smallest in size", "the tiniest one"});
    }
    return {};
}

bool has_word(const std::vector<std::string> &words, std::initializer_list<const char *> options) {
    for (const auto *o : options) {
        if (std::find(words.begin(), words.end(), o) != words.end()) return true;
    }
    return false;
}

bool is_position(Attribute a) {
    return a == Attribute::Horizontal || a == Attribute::Vertical || a == Attribute::Quadrant;
}

// Attribute facts of lesion i within its image.
struct Facts {
    int horizontal;
    int vertical;
    int shape;
    int boundary;
    int density;
    std::size_t area;
};

Facts facts_of(const LesionSpec &l, int height, int width) {
    return {l.center_col < width / 2.0 ? 0 : 1, l.center_row < height / 2.0 ? 0 : 1,
            l.shape == LesionShape::Ellipse ? 0 : 1, l.boundary == Boundary::Sharp ? 0 : 1,
            l.low_density() ? 0 : 1, lesion_area(l, height, width)};
}

bool satisfies(const Clause &c, std::size_t index, const std::vector<Facts> &facts) {
    const auto &f = facts[index];
    switch (c.attribute) {
    case Attribute::Horizontal: return f.horizontal == c.value;
    case Attribute::Vertical: return f.vertical == c.value;
    case Attribute::Quadrant: return 2 * f.vertical + f.horizontal == c.value;
    case Attribute::Shape: return f.shape == c.value;
    case Attribute::Boundary: return f.boundary == c.value;
    case Attribute::Density: return f.density == c.value;
    case Attribute::Size:
        for (std::size_t j = 0; j < facts.size(); ++j) {
            if (j == index) continue;
            if (c.value == 0 && facts[j].area >= f.area) return false;
            if (c.value == 1 && facts[j].area <= f.area) return false;
        }
        return true;
    }
    return false;
}

std::vector<int> filter(const std::vector<Clause> &clauses, const std::vector<Facts> &facts) {
    std::vector<int> hits;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        bool ok = std::all_of(clauses.begin(), clauses.end(), [&](const Clause &c) { return satisfies(c, i, facts); });
        if (ok) hits.push_back(static_cast<int>(i));
    }
    return hits;
}

std::vector<Facts> all_facts(const std::vector<LesionSpec> &lesions, int height, int width) {
    std::vector<Facts> facts;
    facts.reserve(lesions.size());
    for (const auto &l : lesions) facts.push_back(facts_of(l, height, width));
    return facts;
}

// Subsets of `pool` (as index masks) in order of increasing size, then
// lexicographic by bit pattern.
std::vector<std::uint32_t> subsets_by_size(std::size_t n) {
    std::vector<std::uint32_t> masks;
    for (std::uint32_t m = 1; m < (1u << n); ++m) masks.push_back(m);
    std::stable_sort(masks.begin(), masks.end(),
                     [](std::uint32_t a, std::uint32_t b) { return std::popcount(a) < std::popcount(b); });
    return masks;
}

// --- rendering -----------------------------------------------------------

std::vector<double> smooth_noise(Rng &rng, int size, int cells) {
    std::vector<double> grid(static_cast<std::size_t>(cells + 1) * (cells + 1));
    for (auto &g : grid) g = rng.uniform();
    std::vector<double> out(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        const double gy = (y + 0.5) / size * cells;
        const int y0 = std::min(static_cast<int>(gy), cells - 1);
        const double ty = gy - y0;
        for (int x = 0; x < size; ++x) {
            const double gx = (x + 0.5) / size * cells;
            const int x0 = std::min(static_cast<int>(gx), cells - 1);
            const double tx = gx - x0;
            auto g = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy) * (cells + 1) + xx]; };
            out[static_cast<std::size_t>(y) * size + x] = (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                                                          ty * ((1 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
        }
    }
    return out;
}

double lesion_alpha(const LesionSpec &l, double rho) {
    if (l.boundary == Boundary::Sharp) return rho <= 1.0 ? 1.0 : 0.0;
    return std::clamp((1.4 - rho) / 0.8, 0.0, 1.0);  // 0.5 at the outline
}

Image8 render(const std::vector<LesionSpec> &lesions, int size, double noise_sigma, Rng &rng) {
    auto texture = smooth_noise(rng, size, 6);
    const double gx = rng.uniform(-0.08, 0.08);
    const double gy = rng.uniform(-0.08, 0.08);
    std::vector<double> value(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const auto i = static_cast<std::size_t>(y) * size + x;
            value[i] = 0.46 + 0.14 * (texture[i] - 0.5) + gx * ((x + 0.5) / size - 0.5) + gy * ((y + 0.5) / size - 0.5);
        }
    }
    for (const auto &l : lesions) {
        const double r = l.extent() * 1.5 + 2;
        const int y0 = std::max(0, static_cast<int>(l.center_row - r));
        const int y1 = std::min(size - 1, static_cast<int>(l.center_row + r));
        const int x0 = std::max(0, static_cast<int>(l.center_col - r));
        const int x1 = std::min(size - 1, static_cast<int>(l.center_col + r));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double a = lesion_alpha(l, l.radial(y + 0.5, x + 0.5));
                auto &v = value[static_cast<std::size_t>(y) * size + x];
                v = (1 - a) * v + a * l.intensity;
            }
        }
    }
    Image8 image(3, size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double v = value[static_cast<std::size_t>(y) * size + x] + noise_sigma * rng.normal();
            const auto byte = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            for (int c = 0; c < 3; ++c) image.at(c, y, x) = byte;
        }
    }
    return image;
}

// --- layout --------------------------------------------------------------

struct Appearance {
    LesionShape shape;
    Boundary boundary;
    bool low;
    double axis_a, axis_b;
};

Appearance random_appearance(Rng &rng, const GenConfig &cfg) {
    Appearance a;
    a.shape = rng.bernoulli(0.5) ? LesionShape::Ellipse : LesionShape::Blob;
    a.boundary = rng.bernoulli(0.5) ? Boundary::Sharp : Boundary::Fuzzy;
    a.low = rng.bernoulli(0.5);
    a.axis_a = rng.uniform(cfg.min_axis, cfg.max_axis);
    a.axis_b = std::clamp(a.axis_a * rng.uniform(0.7, 1.0), cfg.min_axis, cfg.max_axis);
    return a;
}

LesionSpec make_lesion(const Appearance &a, Rng &rng) {
    LesionSpec l;
    l.shape = a.shape;
    l.boundary = a.boundary;
    l.axis_a = a.axis_a;
    l.axis_b = a.axis_b;
    l.angle = rng.uniform(0.0, kPi);
    l.intensity = a.low ? rng.uniform(0.12, 0.24) : rng.uniform(0.70, 0.84);
    if (a.shape == LesionShape::Blob) {
        l.harmonics = {rng.uniform(0.18, 0.28), rng.uniform(0.0, 2 * kPi), rng.uniform(0.10, 0.18),
                       rng.uniform(0.0, 2 * kPi)};
    }
    return l;
}

// Places the lesion centre inside `quadrant` (or anywhere when < 0) without
// overlapping already placed lesions. Returns false when no spot was found.
bool place(LesionSpec &l, int quadrant, const std::vector<LesionSpec> &placed, const GenConfig &cfg, Rng &rng) {
    const double size = cfg.image_size;
    const double half = size / 2.0;
    const double r = l.extent();
    for (int attempt = 0; attempt < 200; ++attempt) {
        const int q = quadrant >= 0 ? quadrant : rng.uniform_int(0, 3);
        const double row_lo = (q / 2 == 0) ? r + 2 : half + cfg.midline_margin;
        const double row_hi = (q / 2 == 0) ? half - cfg.midline_margin : size - r - 2;
        const double col_lo = (q % 2 == 0) ? r + 2 : half + cfg.midline_margin;
        const double col_hi = (q % 2 == 0) ? half - cfg.midline_margin : size - r - 2;
        if (row_lo > row_hi || col_lo > col_hi) return false;
        l.center_row = rng.uniform(row_lo, row_hi);
        l.center_col = rng.uniform(col_lo, col_hi);
        bool ok = true;
        for (const auto &o : placed) {
            if (std::hypot(o.center_row - l.center_row, o.center_col - l.center_col) < r + o.extent() + 3) {
                ok = false;
                break;
            }
        }
        if (ok) return true;
    }
    return false;
}

struct Draft {
    std::vector<LesionSpec> lesions;
    int target = 0;
    bool disambiguation = false;
};

std::optional<Draft> draft_layout(const GenConfig &cfg, Rng &rng) {
    Draft d;
    const int n = rng.uniform_int(cfg.min_lesions, cfg.max_lesions);
    d.disambiguation = n >= 2 && rng.bernoulli(cfg.disambiguation_rate);

    std::vector<Appearance> looks;
    std::vector<int> quadrants(static_cast<std::size_t>(n), -1);
    int twins = 0;
    if (d.disambiguation) {
        twins = std::min(n, rng.uniform_int(2, 3));
        const auto base = random_appearance(rng, cfg);
        std::vector<int> qs{0, 1, 2, 3};
        rng.shuffle(qs);
        for (int i = 0; i < twins; ++i) {
            auto a = base;
            const double jitter = rng.uniform(0.97, 1.03);
            a.axis_a = std::clamp(base.axis_a * jitter, cfg.min_axis, cfg.max_axis);
            a.axis_b = std::clamp(base.axis_b * jitter, cfg.min_axis, cfg.max_axis);
            looks.push_back(a);
            quadrants[static_cast<std::size_t>(i)] = qs[static_cast<std::size_t>(i)];
        }
    }
    while (static_cast<int>(looks.size()) < n) looks.push_back(random_appearance(rng, cfg));

    for (int i = 0; i < n; ++i) {
        auto l = make_lesion(looks[static_cast<std::size_t>(i)], rng);
        if (!place(l, quadrants[static_cast<std::size_t>(i)], d.lesions, cfg, rng)) return std::nullopt;
        d.lesions.push_back(l);
    }
    d.target = d.disambiguation ? rng.uniform_int(0, twins - 1) : rng.uniform_int(0, n - 1);
    return d;
}

std::vector<Clause> true_clauses(const Draft &d, const std::vector<Facts> &facts, const GenConfig &cfg, Rng &rng) {
    const auto &f = facts[static_cast<std::size_t>(d.target)];
    std::vector<Clause> out;
    auto add = [&](Attribute a, int v) { out.push_back({a, v, clause_text(a, v, rng)}); };
    add(Attribute::Quadrant, 2 * f.vertical + f.horizontal);
    add(Attribute::Horizontal, f.horizontal);
    add(Attribute::Vertical, f.vertical);
    add(Attribute::Shape, f.shape);
    add(Attribute::Boundary, f.boundary);
    add(Attribute::Density, f.density);
    if (facts.size() > 1) {
        bool largest = true, smallest = true;
        for (std::size_t j = 0; j < facts.size(); ++j) {
            if (static_cast<int>(j) == d.target) continue;
            if (static_cast<double>(f.area) < cfg.size_margin * static_cast<double>(facts[j].area)) largest = false;
            if (cfg.size_margin * static_cast<double>(f.area) > static_cast<double>(facts[j].area)) smallest = false;
        }
        if (largest) add(Attribute::Size, 0);
        if (smallest) add(Attribute::Size, 1);
    }
    return out;
}

bool redundant_positions(const std::vector<Clause> &clauses) {
    int quadrant = 0, horizontal = 0, vertical = 0;
    for (const auto &c : clauses) {
        quadrant += c.attribute == Attribute::Quadrant;
        horizontal += c.attribute == Attribute::Horizontal;
        vertical += c.attribute == Attribute::Vertical;
    }
    return (quadrant && (horizontal || vertical)) || (horizontal && vertical);
}

}  // namespace

// --- LesionSpec ------------------------------------------------------------

double LesionSpec::radial(double row, double col) const {
    const double dy = row - center_row;
    const double dx = col - center_col;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / axis_a;
    const double v = (-dx * s + dy * c) / axis_b;
    double rho = std::hypot(u, v);
    if (shape == LesionShape::Blob) {
        const double t = std::atan2(v, u);
        rho /= 1.0 + harmonics[0] * std::sin(3 * t + harmonics[1]) + harmonics[2] * std::sin(5 * t + harmonics[3]);
    }
    return rho;
}

double LesionSpec::extent() const {
    const double scale = shape == LesionShape::Blob ? 1.0 + harmonics[0] + harmonics[2] : 1.0;
    return std::max(axis_a, axis_b) * scale;
}

Image8 rasterize(const LesionSpec &lesion, int height, int width) {
    Image8 mask(1, height, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            mask.at(0, y, x) = lesion.radial(y + 0.5, x + 0.5) <= 1.0 ? 1 : 0;
        }
    }
    return mask;
}

std::size_t lesion_area(const LesionSpec &lesion, int height, int width) {
    const auto m = rasterize(lesion, height, width);
    return static_cast<std::size_t>(std::count(m.data.begin(), m.data.end(), 1));
}

void GenConfig::validate() const {
    if (image_size < 32 || min_lesions < 1 || max_lesions < min_lesions || min_axis < 3.0 || max_axis < min_axis ||
        disambiguation_rate < 0.0 || disambiguation_rate > 1.0 || max_retries < 1) {
        throw Error(ErrorCode::InvalidConfig, "invalid synthetic generator configuration");
    }
}

// --- expressions -----------------------------------------------------------

ParsedExpression split_expression(const std::string &expression) {
    ParsedExpression p;
    std::vector<std::string> parts;
    std::stringstream ss(expression);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto first = item.find_first_not_of(' ');
        const auto last = item.find_last_not_of(' ');
        parts.push_back(first == std::string::npos ? std::string{} : item.substr(first, last - first + 1));
    }
    if (parts.empty()) return p;
    // The head noun phrase is the first two words of the first part.
    const auto &first = parts.front();
    auto space = first.find(' ');
    space = space == std::string::npos ? std::string::npos : first.find(' ', space + 1);
    if (space == std::string::npos) {
        p.head = first;
    } else {
        p.head = first.substr(0, space);
        p.clauses.push_back(first.substr(space + 1));
    }
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (!parts[i].empty()) p.clauses.push_back(parts[i]);
    }
    return p;
}

std::string join_expression(const ParsedExpression &parsed) {
    std::string out = parsed.head;
    for (std::size_t i = 0; i < parsed.clauses.size(); ++i) out += (i == 0 ? " " : ", ") + parsed.clauses[i];
    return out;
}

std::optional<Clause> interpret_clause(const std::string &text) {
    const auto words = basic_split(text);
    const bool left = has_word(words, {"left"}), right = has_word(words, {"right"});
    const bool upper = has_word(words, {"upper", "top"}), lower = has_word(words, {"lower", "bottom"});
    if ((left || right) && (upper || lower)) return Clause{Attribute::Quadrant, 2 * (lower ? 1 : 0) + (right ? 1 : 0), text};
    if (left || right) return Clause{Attribute::Horizontal, right ? 1 : 0, text};
    if (upper || lower) return Clause{Attribute::Vertical, lower ? 1 : 0, text};
    if (has_word(words, {"round", "oval"})) return Clause{Attribute::Shape, 0, text};
    if (has_word(words, {"irregular", "lobulated"})) return Clause{Attribute::Shape, 1, text};
    if (has_word(words, {"clear", "sharp", "well"})) return Clause{Attribute::Boundary, 0, text};
    if (has_word(words, {"blurred", "fuzzy", "ill"})) return Clause{Attribute::Boundary, 1, text};
    if (has_word(words, {"low", "hypodense", "dark"})) return Clause{Attribute::Density, 0, text};
    if (has_word(words, {"high", "hyperdense", "bright"})) return Clause{Attribute::Density, 1, text};
    if (has_word(words, {"largest", "biggest"})) return Clause{Attribute::Size, 0, text};
    if (has_word(words, {"smallest", "tiniest"})) return Clause{Attribute::Size, 1, text};
    return std::nullopt;
}

std::vector<int> resolve(const std::string &expression, const std::vector<LesionSpec> &lesions, int height, int width) {
    std::vector<Clause> clauses;
    for (const auto &text : split_expression(expression).clauses) {
        if (auto c = interpret_clause(text)) clauses.push_back(*c);
    }
    return filter(clauses, all_facts(lesions, height, width));
}

// --- generation ------------------------------------------------------------

ReferringSample generate_sample(std::uint64_t seed, const GenConfig &cfg) {
    cfg.validate();
    Rng rng(seed);
    const int size = cfg.image_size;
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        auto draft = draft_layout(cfg, rng);
        if (!draft) continue;
        const auto facts = all_facts(draft->lesions, size, size);
        auto candidates = true_clauses(*draft, facts, cfg, rng);

        // Minimal uniquely-resolving clause subsets; one is chosen at random.
        std::vector<std::vector<Clause>> minimal;
        std::size_t best = 0;
        for (auto m : subsets_by_size(candidates.size())) {
            const auto count = static_cast<std::size_t>(std::popcount(m));
            if (!minimal.empty() && count > best) break;
            std::vector<Clause> subset;
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                if (m & (1u << i)) subset.push_back(candidates[i]);
            }
            if (redundant_positions(subset)) continue;
            const auto hits = filter(subset, facts);
            if (hits.size() == 1 && hits.front() == draft->target) {
                minimal.push_back(subset);
                best = count;
            }
        }
        const bool single = draft->lesions.size() == 1;
        if (minimal.empty() && !single) continue;

        std::vector<Clause> clauses = single ? std::vector<Clause>{} : rng.pick(minimal);
        // Complete the description: one position clause and every appearance attribute.
        const bool has_position =
            std::any_of(clauses.begin(), clauses.end(), [](const Clause &c) { return is_position(c.attribute); });
        for (const auto &c : candidates) {
            const bool present = std::any_of(clauses.begin(), clauses.end(), [&](const Clause &k) {
                return k.attribute == c.attribute && k.value == c.value;
            });
            if (present) continue;
            if (is_position(c.attribute) && (has_position || c.attribute != Attribute::Quadrant)) continue;
            clauses.push_back(c);
        }
        rng.shuffle(clauses);

        ParsedExpression parsed;
        parsed.head = rng.pick(kHeads);
        for (const auto &c : clauses) parsed.clauses.push_back(c.text);

        ReferringSample sample;
        sample.seed = seed;
        sample.lesions = std::move(draft->lesions);
        sample.target_index = draft->target;
        sample.disambiguation = draft->disambiguation;
        sample.expression = join_expression(parsed);
        sample.mask = rasterize(sample.lesions[static_cast<std::size_t>(sample.target_index)], size, size);
        sample.image = render(sample.lesions, size, cfg.noise_sigma, rng);

        const auto check = resolve(sample.expression, sample.lesions, size, size);
        if (check.size() != 1 || check.front() != sample.target_index) continue;
        return sample;
    }
    throw Error(ErrorCode::GenerationRetryExceeded,
                "could not generate a uniquely referring sample for seed " + std::to_string(seed));
}

std::string mirror_expression(const std::string &expression, bool horizontal, bool vertical) {
    static const std::vector<std::pair<std::string, std::string>> h_pairs = {{"left", "right"}};
    static const std::vector<std::pair<std::string, std::string>> v_pairs = {{"upper", "lower"}, {"top", "bottom"}};
    auto swap_word = [&](const std::string &w) {
        auto lookup = [&](const auto &pairs) -> std::optional<std::string> {
            for (const auto &[a, b] : pairs) {
                if (w == a) return b;
                if (w == b) return a;
            }
            return std::nullopt;
        };
        if (horizontal) {
            if (auto r = lookup(h_pairs)) return *r;
        }
        if (vertical) {
            if (auto r = lookup(v_pairs)) return *r;
        }
        return w;
    };
    std::string out;
    std::size_t i = 0;
    while (i < expression.size()) {
        if (!std::isalpha(static_cast<unsigned char>(expression[i]))) {
            out += expression[i++];
            continue;
        }
        std::size_t j = i;
        while (j < expression.size() && std::isalpha(static_cast<unsigned char>(expression[j]))) ++j;
        out += swap_word(expression.substr(i, j - i));
        i = j;
    }
    return out;
}

std::uint64_t derive_seed(std::uint64_t master_seed, const std::string &split, std::uint64_t index) {
    std::uint64_t salt = 0;
    for (unsigned char c : split) salt = splitmix64(salt ^ c);
    return splitmix64(splitmix64(master_seed) ^ splitmix64(salt + index));
}

std::vector<ReferringSample> generate_split(std::uint64_t master_seed, const std::string &split, int count,
                                            const GenConfig &cfg) {
    std::vector<ReferringSample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        auto s = generate_sample(derive_seed(master_seed, split, static_cast<std::uint64_t>(i)), cfg);
        std::ostringstream id;
        id << split << '_';
        id.width(6);
        id.fill('0');
        id << i;
        s.id = id.str();
        samples.push_back(std::move(s));
    }
    return samples;
}

std::string partial_text(const ReferringSample &sample, double fraction) {
    if (fraction >= 1.0) return sample.expression;
    auto parsed = split_expression(sample.expression);
    const std::size_t n = parsed.clauses.size();
    if (n <= 1) return sample.expression;
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));

    std::vector<bool> kept(n, false);
    if (!sample.lesions.empty()) {
        const int h = sample.mask.height > 0 ? sample.mask.height : sample.image.height;
        const int w = sample.mask.width > 0 ? sample.mask.width : sample.image.width;
        const auto facts = all_facts(sample.lesions, h, w);
        std::vector<std::optional<Clause>> interpreted;
        for (const auto &t : parsed.clauses) interpreted.push_back(interpret_clause(t));
        for (auto m : subsets_by_size(n)) {
            std::vector<Clause> subset;
            for (std::size_t i = 0; i < n; ++i) {
                if ((m & (1u << i)) && interpreted[i]) subset.push_back(*interpreted[i]);
            }
            const auto hits = filter(subset, facts);
            if (hits.size() == 1 && hits.front() == sample.target_index) {
                for (std::size_t i = 0; i < n; ++i) kept[i] = (m & (1u << i)) != 0;
                break;
            }
        }
    }
    auto count = static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
    for (std::size_t i = 0; i < n && count < keep; ++i) {
        if (!kept[i]) {
            kept[i] = true;
            ++count;
        }
    }
    ParsedExpression out{parsed.head, {}};
    for (std::size_t i = 0; i < n; ++i) {
        if (kept[i]) out.clauses.push_back(parsed.clauses[i]);
    }
    return join_expression(out);
}

// --- serialisation -----------------------------------------------------------

void to_json(nlohmann::json &j, const GenConfig &c) {
    j = nlohmann::json{{"image_size", c.image_size},     {"min_lesions", c.min_lesions},
                       {"max_lesions", c.max_lesions},   {"min_axis", c.min_axis},
                       {"max_axis", c.max_axis},         {"disambiguation_rate", c.disambiguation_rate},
                       {"max_retries", c.max_retries},   {"noise_sigma", c.noise_sigma},
                       {"size_margin", c.size_margin},   {"midline_margin", c.midline_margin}};
}

void from_json(const nlohmann::json &j, GenConfig &c) {
    GenConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.min_lesions = j.value("min_lesions", d.min_lesions);
    c.max_lesions = j.value("max_lesions", d.max_lesions);
    c.min_axis = j.value("min_axis", d.min_axis);
    c.max_axis = j.value("max_axis", d.max_axis);
    c.disambiguation_rate = j.value("disambiguation_rate", d.disambiguation_rate);
    c.max_retries = j.value("max_retries", d.max_retries);
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.size_margin = j.value("size_margin", d.size_margin);
    c.midline_margin = j.value("midline_margin", d.midline_margin);
}

void to_json(nlohmann::json &j, const LesionSpec &l) {
    j = nlohmann::json{{"shape", l.shape == LesionShape::Ellipse ? "ellipse" : "blob"},
                       {"center", {l.center_row, l.center_col}},
                       {"axes", {l.axis_a, l.axis_b}},
                       {"angle", l.angle},
                       {"intensity", l.intensity},
                       {"boundary", l.boundary == Boundary::Sharp ? "sharp" : "fuzzy"},
                       {"harmonics", l.harmonics}};
}

void from_json(const nlohmann::json &j, LesionSpec &l) {
    l.shape = j.at("shape").get<std::string>() == "blob" ? LesionShape::Blob : LesionShape::Ellipse;
    l.center_row = j.at("center").at(0).get<double>();
    l.center_col = j.at("center").at(1).get<double>();
    l.axis_a = j.at("axes").at(0).get<double>();
    l.axis_b = j.at("axes").at(1).get<double>();
    l.angle = j.at("angle").get<double>();
    l.intensity = j.at("intensity").get<double>();
    l.boundary = j.at("boundary").get<std::string>() == "fuzzy" ? Boundary::Fuzzy : Boundary::Sharp;
    l.harmonics = j.at("harmonics").get<std::array<double, 4>>();
}

DatasetManifest write_samples(const std::filesystem::path &root, const std::string &split,
                              const std::vector<ReferringSample> &samples) {
    const auto dir = root / split;
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    DatasetManifest manifest{root, split, {}};
    std::ofstream out(dir / "annotations.jsonl", std::ios::trunc);
    if (!out) throw Error(ErrorCode::MissingFile, "cannot write annotations in " + dir.string());
    for (const auto &s : samples) {
        ManifestRecord r{"images/" + s.id + ".png", "masks/" + s.id + ".png", s.expression, s.seed};
        write_png(dir / r.image, s.image);
        write_png(dir / r.mask, mask_to_display(s.mask));
        nlohmann::json j{{"image", r.image},
                         {"mask", r.mask},
                         {"expression", r.expression},
                         {"seed", r.seed},
                         {"id", s.id},
                         {"target_index", s.target_index},
                         {"disambiguation", s.disambiguation},
                         {"lesions", s.lesions}};
        out << j.dump() << '\n';
        manifest.records.push_back(std::move(r));
    }
    return manifest;
}

DatasetManifest write_dataset(const std::filesystem::path &root, const std::string &split, int count,
                              std::uint64_t master_seed, const GenConfig &cfg) {
    auto manifest = write_samples(root, split, generate_split(master_seed, split, count, cfg));
    // Root-level manifest records the generator settings per split.
    const auto manifest_path = root / "manifest.json";
    nlohmann::json m = nlohmann::json::object();
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        m = nlohmann::json::parse(in, nullptr, false);
        if (m.is_discarded() || !m.is_object()) m = nlohmann::json::object();
    }
    m["format_version"] = 1;
    m["splits"][split] = {{"count", count}, {"master_seed", master_seed}, {"generator", cfg}};
    std::ofstream(manifest_path) << m.dump(2) << '\n';
    return manifest;
}

std::vector<ReferringSample> load_dataset(const std::filesystem::path &root, const std::string &split) {
    const auto dir = root / split;
    const auto annotations = dir / "annotations.jsonl";
    std::ifstream in(annotations);
    if (!in) throw Error(ErrorCode::MissingFile, "missing " + annotations.string());
    std::vector<ReferringSample> samples;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = annotations.string() + ":" + std::to_string(lineno);
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("image") || !j.contains("mask") ||
            !j.contains("expression") || !j["image"].is_string() || !j["mask"].is_string() ||
            !j["expression"].is_string()) {
            throw Error(ErrorCode::MalformedRecord, where + ": record needs string fields image, mask, expression");
        }
        ReferringSample s;
        const auto image_rel = j["image"].get<std::string>();
        const auto mask_rel = j["mask"].get<std::string>();
        for (const auto &rel : {image_rel, mask_rel}) {
            if (!std::filesystem::exists(dir / rel)) {
                throw Error(ErrorCode::MissingFile, where + " (" + image_rel + "): missing file " + (dir / rel).string());
            }
        }
        try {
            s.image = read_image(dir / image_rel, 3);
            s.mask = mask_from_display(read_image(dir / mask_rel, 1));
            s.expression = j["expression"].get<std::string>();
            s.seed = j.value("seed", std::uint64_t{0});
            s.id = j.value("id", std::filesystem::path(image_rel).stem().string());
            s.target_index = j.value("target_index", -1);
            s.disambiguation = j.value("disambiguation", false);
            if (j.contains("lesions")) s.lesions = j["lesions"].get<std::vector<LesionSpec>>();
        } catch (const nlohmann::json::exception &e) {
            throw Error(ErrorCode::MalformedRecord, where + ": " + e.what());
        }
        if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
            throw Error(ErrorCode::MalformedRecord, where + ": image and mask sizes differ");
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

std::pair<std::vector<ReferringSample>, std::vector<ReferringSample>> split_train_val(
    std::vector<ReferringSample> samples, double val_fraction, std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(samples);
    const auto val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(samples.size())));
    std::vector<ReferringSample> val_set(std::make_move_iterator(samples.begin()),
                                         std::make_move_iterator(samples.begin() + static_cast<std::ptrdiff_t>(val)));
    std::vector<ReferringSample> train_set(std::make_move_iterator(samples.begin() + static_cast<std::ptrdiff_t>(val)),
                                           std::make_move_iterator(samples.end()));
    return {std::move(train_set), std::move(val_set)};
}

}  // namespace lsms
