#include "peftdml/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace peftdml {

namespace {

std::vector<int> confidence_order(const std::vector<Detection>& dets) {
    std::vector<int> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].confidence > dets[b].confidence; });
    return order;
}

}  // namespace

std::vector<Detection> dedup_detections(std::vector<Detection> dets, double radius) {
    std::vector<Detection> kept;
    for (int idx : confidence_order(dets)) {
        const Detection& d = dets[idx];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == d.class_id && k.box.center_dist_2d(d.box) < radius) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

MatchingResult match_detections(const std::vector<Detection>& preds,
                                const std::vector<ObjectInstance>& gts, double threshold) {
    MatchingResult result;
    result.threshold = threshold;
    std::vector<bool> gt_taken(gts.size(), false);
    std::vector<bool> pred_matched(preds.size(), false);
    for (int pi : confidence_order(preds)) {
        const Detection& p = preds[pi];
        int best = -1;
        double best_dist = threshold;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_taken[gi] || gts[gi].class_id != p.class_id) continue;
            const double d = p.box.center_dist_2d(gts[gi].box);
            if (d <= threshold && (best < 0 || d < best_dist)) {
                best = static_cast<int>(gi);
                best_dist = d;
            }
        }
        if (best >= 0) {
            gt_taken[best] = true;
            pred_matched[pi] = true;
            result.matches.push_back({pi, best});
        }
    }
    for (size_t pi = 0; pi < preds.size(); ++pi) {
        if (!pred_matched[pi]) result.false_positives.push_back(static_cast<int>(pi));
    }
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        if (!gt_taken[gi]) result.false_negatives.push_back(static_cast<int>(gi));
    }
    return result;
}

double average_precision(std::vector<ApSample> samples, int total_gt) {
    if (total_gt <= 0) throw ContractError("average_precision: no ground truth");
    if (samples.empty()) return 0.0;
    std::stable_sort(samples.begin(), samples.end(),
                     [](const ApSample& a, const ApSample& b) { return a.confidence > b.confidence; });
    const int n = static_cast<int>(samples.size());
    std::vector<double> precision(n);
    int tp = 0;
    for (int k = 0; k < n; ++k) {
        tp += samples[k].tp;
        precision[k] = static_cast<double>(tp) / (k + 1);
    }
    // max-interpolated precision from each rank onward
    for (int k = n - 2; k >= 0; --k) precision[k] = std::max(precision[k], precision[k + 1]);
    double ap = 0.0;
    int seen_tp = 0;
    for (int k = 0; k < n; ++k) {
        if (!samples[k].tp) continue;
        ++seen_tp;
        ap += precision[k] / total_gt;  // each TP adds one recall step of 1/total_gt
    }
    (void)seen_tp;
    return ap;
}

TpErrors tp_error_means(const std::vector<MatchedPair>& pairs) {
    TpErrors e;
    if (pairs.empty()) return e;  // worst-case 1.0 defaults with the flag set
    e.no_matches = false;
    e.match_count = static_cast<int>(pairs.size());
    double ate = 0, ase = 0, aoe = 0, ave = 0;
    int attr_correct = 0;
    for (const auto& [pred, gt] : pairs) {
        ate += pred.box.center_dist_2d(gt.box);
        // center-and-yaw-aligned IoU depends only on the sizes
        const double vi = std::min(pred.box.w, gt.box.w) * std::min(pred.box.l, gt.box.l) *
                          std::min(pred.box.h, gt.box.h);
        const double vp = pred.box.w * pred.box.l * pred.box.h;
        const double vg = gt.box.w * gt.box.l * gt.box.h;
        ase += 1.0 - vi / (vp + vg - vi);
        aoe += std::fabs(wrap_angle(pred.box.yaw - gt.box.yaw));
        const double dvx = pred.box.vx - gt.box.vx, dvy = pred.box.vy - gt.box.vy;
        ave += std::sqrt(dvx * dvx + dvy * dvy);
        attr_correct += pred.moving == gt.moving;
    }
    const double n = static_cast<double>(pairs.size());
    e.mate = ate / n;
    e.mase = ase / n;
    e.maoe = aoe / n;
    e.mave = ave / n;
    e.maae = 1.0 - attr_correct / n;
    return e;
}

double composite_score(double map, const TpErrors& errors) {
    double acc = 5.0 * map;
    for (double err : {errors.mate, errors.mase, errors.maoe, errors.mave, errors.maae}) {
        acc += std::max(0.0, 1.0 - err);
    }
    return acc / 10.0;
}

nlohmann::json metrics_to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["protocol"] = report.protocol;
    j["seed"] = report.seed;
    j["config_hash"] = report.config_hash;
    j["map"] = report.map;
    j["composite"] = report.composite;
    j["mate"] = report.errors.mate;
    j["mase"] = report.errors.mase;
    j["maoe"] = report.errors.maoe;
    j["mave"] = report.errors.mave;
    j["maae"] = report.errors.maae;
    j["per_class"] = report.per_class;
    j["per_condition"] = report.per_condition;
    j["per_subset"] = report.per_subset;
    j["zero_shot_acc"] = report.zero_shot_acc;
    j["trainable_fraction"] = report.trainable_fraction;
    return j;
}

}  // namespace peftdml
