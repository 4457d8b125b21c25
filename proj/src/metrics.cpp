#include "lsms/metrics.hpp"

#include <iomanip>
#include <sstream>

#include "lsms/errors.hpp"

namespace lsms {

MaskCounts count_overlap(const torch::Tensor &pred, const torch::Tensor &gt) {
    if (pred.sizes() != gt.sizes()) {
        std::ostringstream msg;
        msg << "mask shapes differ: " << pred.sizes() << " vs " << gt.sizes();
        throw Error(ErrorCode::ShapeMismatch, msg.str());
    }
    const auto p = pred.to(torch::kBool);
    const auto g = gt.to(torch::kBool);
    MaskCounts c;
    c.pred = p.sum().item<std::int64_t>();
    c.gt = g.sum().item<std::int64_t>();
    c.intersection = (p & g).sum().item<std::int64_t>();
    return c;
}

double dice(const MaskCounts &c, double both_empty_value) {
    const auto denom = c.pred + c.gt;
    if (denom == 0) return both_empty_value;
    return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(denom);
}

double dice(const torch::Tensor &pred, const torch::Tensor &gt, double both_empty_value) {
    return dice(count_overlap(pred, gt), both_empty_value);
}

double iou(const MaskCounts &c, double both_empty_value) {
    const auto u = c.union_size();
    if (u == 0) return both_empty_value;
    return static_cast<double>(c.intersection) / static_cast<double>(u);
}

double iou(const torch::Tensor &pred, const torch::Tensor &gt, double both_empty_value) {
    return iou(count_overlap(pred, gt), both_empty_value);
}

double miou(const std::vector<std::pair<torch::Tensor, torch::Tensor>> &pairs, double both_empty_value) {
    if (pairs.empty()) throw Error(ErrorCode::EmptyEvaluation, "mIoU over an empty list");
    double sum = 0.0;
    for (const auto &[p, g] : pairs) sum += iou(p, g, both_empty_value);
    return sum / static_cast<double>(pairs.size());
}

void MetricsReport::finalize() {
    if (per_sample.empty()) throw Error(ErrorCode::EmptyEvaluation, "no samples evaluated");
    double d = 0.0, m = 0.0;
    for (const auto &s : per_sample) {
        d += s.dice;
        m += s.iou;
    }
    dice_mean = d / static_cast<double>(per_sample.size());
    miou_mean = m / static_cast<double>(per_sample.size());
}

std::string MetricsReport::table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << "split=" << split << " subset=" << subset << " text_fraction=" << text_fraction
        << " samples=" << per_sample.size() << "\n";
    out << "checkpoint=" << checkpoint_id << " config=" << config_hash << "\n";
    out << "Dice " << dice_mean << "  mIoU " << miou_mean << "\n";
    return out.str();
}

void to_json(nlohmann::json &j, const SampleScore &s) { j = {{"id", s.id}, {"dice", s.dice}, {"iou", s.iou}}; }

void to_json(nlohmann::json &j, const MetricsReport &r) {
    j = nlohmann::json{{"dice_mean", r.dice_mean},         {"miou_mean", r.miou_mean},
                       {"per_sample", r.per_sample},       {"checkpoint_id", r.checkpoint_id},
                       {"split", r.split},                 {"config_hash", r.config_hash},
                       {"text_fraction", r.text_fraction}, {"subset", r.subset}};
}

void from_json(const nlohmann::json &j, MetricsReport &r) {
    r.dice_mean = j.at("dice_mean").get<double>();
    r.miou_mean = j.at("miou_mean").get<double>();
    r.checkpoint_id = j.value("checkpoint_id", "");
    r.split = j.value("split", "");
    r.config_hash = j.value("config_hash", "");
    r.text_fraction = j.value("text_fraction", 1.0);
    r.subset = j.value("subset", "all");
    r.per_sample.clear();
    for (const auto &s : j.value("per_sample", nlohmann::json::array())) {
        r.per_sample.push_back({s.at("id").get<std::string>(), s.at("dice").get<double>(), s.at("iou").get<double>()});
    }
}

}  // namespace lsms
