#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "peftdml/world.hpp"

namespace peftdml {

struct Detection {
    int class_id = 0;
    double confidence = 0.0;
    Box3D box;  // decoded box; vx/vy carry the predicted velocity
    bool moving = false;
};

// Greedy same-class suppression: scanning by descending confidence, drop
// any detection within `radius` (2D) of an already-kept one of its class.
std::vector<Detection> dedup_detections(std::vector<Detection> dets, double radius);

struct MatchingResult {
    double threshold = 0.0;
    std::vector<std::pair<int, int>> matches;  // (prediction, ground-truth) indices
    std::vector<int> false_positives;
    std::vector<int> false_negatives;
};

// Predictions in descending confidence order, each greedily matched to
// the nearest unmatched same-class ground truth within the 2D
// center-distance threshold.
MatchingResult match_detections(const std::vector<Detection>& preds,
                                const std::vector<ObjectInstance>& gts, double threshold);

struct ApSample {
    double confidence = 0.0;
    bool tp = false;
};

// All-point max-interpolated average precision over confidence-ranked
// samples; total_gt must be positive (callers skip GT-free classes).
double average_precision(std::vector<ApSample> samples, int total_gt);

struct MatchedPair {
    Detection pred;
    ObjectInstance gt;
};

struct TpErrors {
    double mate = 1.0;  // 2D translation error
    double mase = 1.0;  // 1 - IoU of center-and-yaw-aligned boxes
    double maoe = 1.0;  // absolute wrapped yaw difference
    double mave = 1.0;  // L2 velocity error
    double maae = 1.0;  // 1 - attribute accuracy
    bool no_matches = true;
    int match_count = 0;
};

TpErrors tp_error_means(const std::vector<MatchedPair>& pairs);

// (5 * mAP + sum of max(0, 1 - err)) / 10 with unit normalizers
double composite_score(double map, const TpErrors& errors);

struct MetricsReport {
    std::string protocol;
    uint64_t seed = 0;
    std::string config_hash;
    double map = 0.0;  // mean over classes and distance thresholds
    double composite = 0.0;
    TpErrors errors;
    std::map<std::string, double> per_class;
    std::map<std::string, double> per_condition;
    std::map<std::string, double> per_subset;
    double zero_shot_acc = -1.0;
    double trainable_fraction = 0.0;
    std::map<double, double> map_by_threshold;  // in-memory detail, not serialized
};

nlohmann::json metrics_to_json(const MetricsReport& report);

}  // namespace peftdml
