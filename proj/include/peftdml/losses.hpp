#pragma once

#include <vector>

#include "peftdml/fusion.hpp"

namespace peftdml {

struct LossConfig {
    double lambda_det = 1.0;
    double lambda_met = 0.5;
    double lambda_cons = 0.1;
    double margin = 0.3;  // triplet margin
    double gamma = 2.0;   // focal exponent
    // Cross-modal pair term inside the consistency loss (same instance,
    // same frame, different object-level modalities). On by default: the
    // zero-shot protocol needs instance-level cross-modal alignment, which
    // class-level triplets alone do not provide at this scale.
    bool cross_modal_consistency = true;

    void validate() const;
};

struct LossBreakdown {
    double det_cls = 0;
    double det_iou = 0;
    double det_orient = 0;
    double metric = 0;
    double consistency = 0;
    double total = 0;
};

// softmax p over logits; -(1 - p_target)^gamma * log p_target
Tensor focal_ce(const Tensor& logits, int target_class, double gamma);
Tensor focal_ce_rows(const Tensor& logits, const std::vector<int>& targets, double gamma);  // [n]

// Axis-aligned 3D IoU on yaw-ignored boxes (length along x, width along
// y, height along z); symmetric.
double iou_3d(const Box3D& a, const Box3D& b);

struct DetTargets {
    std::vector<int> class_targets;  // per row; background = kNumClasses
    std::vector<int> assigned_rows;  // row indices with ground truth
    std::vector<Box3D> anchors;      // per assigned row
    std::vector<Box3D> gt_boxes;     // per assigned row
};

struct DetLossTerms {
    Tensor cls;
    Tensor iou;
    Tensor orient;
};

// cls: mean focal over every candidate; iou: mean (1 - IoU(decoded, gt))
// over assigned candidates; orient: mean L1 over (sin, cos) pairs.
// Assigned-candidate means are 0 when nothing is assigned.
DetLossTerms det_loss(const DetectionSlices& outputs, const DetTargets& targets, double gamma);

// hinge on Euclidean distances between unit-norm embeddings
Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double alpha);
// rowwise variant over [t x d] index-aligned triplets; returns [t] hinges
Tensor triplet_loss_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                         double alpha);

enum class MiningStrategy { BatchHardCrossModal };

struct EmbeddingMeta {
    int label = 0;
    int modality = 0;
};

struct Triplet {
    int anchor = 0;
    int positive = 0;
    int negative = 0;
    bool operator==(const Triplet&) const = default;
};

// Batch-hard cross-modal mining: positive = farthest same-class embedding
// of a different modality, negative = nearest different-class embedding;
// anchors without a cross-modal positive are skipped; ties break to the
// lowest index.
std::vector<Triplet> mine_triplets(const std::vector<double>& embeddings, int dim,
                                   const std::vector<EmbeddingMeta>& metas,
                                   MiningStrategy strategy);

// mean squared Euclidean distance over index-aligned row pairs; pass
// undefined tensors for "no pairs" (loss 0)
Tensor consistency_loss(const Tensor& z_t, const Tensor& z_t1);

struct TotalLoss {
    Tensor total;
    LossBreakdown breakdown;
};

TotalLoss total_loss(const DetLossTerms& det, const Tensor& metric, const Tensor& consistency,
                     const LossConfig& config);

}  // namespace peftdml
