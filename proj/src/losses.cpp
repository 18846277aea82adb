#include "peftdml/losses.hpp"

#include <algorithm>
#include <cmath>

namespace peftdml {

void LossConfig::validate() const {
    if (lambda_det < 0 || lambda_met < 0 || lambda_cons < 0) {
        throw ConfigError("loss: lambdas must be nonnegative");
    }
    if (margin <= 0) throw ConfigError("loss: margin must be positive");
    if (gamma < 0) throw ConfigError("loss: gamma must be nonnegative");
}

Tensor focal_ce_rows(const Tensor& logits, const std::vector<int>& targets, double gamma) {
    if (logits.rank() != 2) throw ShapeError("focal_ce: logits must be [n x classes]");
    if (static_cast<int>(targets.size()) != logits.rows()) {
        throw ContractError("focal_ce: target count mismatch");
    }
    for (int t : targets) {
        if (t < 0 || t >= logits.cols()) throw ContractError("focal_ce: target class out of range");
    }
    Tensor logp_t = gather_cols(log_softmax_rows(logits), targets);
    Tensor focal = pow_const(add_scalar(neg(exp_ew(logp_t)), 1.0), gamma);  // (1 - p_t)^gamma
    return neg(mul(focal, logp_t));
}

Tensor focal_ce(const Tensor& logits, int target_class, double gamma) {
    if (logits.rank() != 1) throw ShapeError("focal_ce: logit vector expected");
    return focal_ce_rows(as_row(logits), {target_class}, gamma);  // [1]
}

double iou_3d(const Box3D& a, const Box3D& b) {
    if (a.w <= 0 || a.l <= 0 || a.h <= 0 || b.w <= 0 || b.l <= 0 || b.h <= 0) {
        throw DomainError("iou_3d: nonpositive box size");
    }
    auto overlap = [](double c1, double s1, double c2, double s2) {
        const double lo = std::max(c1 - s1 / 2, c2 - s2 / 2);
        const double hi = std::min(c1 + s1 / 2, c2 + s2 / 2);
        return std::max(0.0, hi - lo);
    };
    const double ix = overlap(a.x, a.l, b.x, b.l);
    const double iy = overlap(a.y, a.w, b.y, b.w);
    const double iz = overlap(a.z, a.h, b.z, b.h);
    const double inter = ix * iy * iz;
    const double va = a.w * a.l * a.h;
    const double vb = b.w * b.l * b.h;
    return inter / (va + vb - inter);
}

namespace {

Tensor const_vec(const std::vector<double>& v) {
    return Tensor::of({static_cast<int>(v.size())}, v);
}

// differentiable axis-aligned IoU of decoded boxes against constant GT
Tensor iou_graph(const Tensor& box_residuals, const std::vector<Box3D>& anchors,
                 const std::vector<Box3D>& gts) {
    const int a = static_cast<int>(anchors.size());
    std::vector<double> acx(a), acy(a), acz(a), aw(a), al(a), ah(a);
    std::vector<double> gxl(a), gxh(a), gyl(a), gyh(a), gzl(a), gzh(a), gvol(a);
    for (int i = 0; i < a; ++i) {
        acx[i] = anchors[i].x;
        acy[i] = anchors[i].y;
        acz[i] = anchors[i].z;
        aw[i] = anchors[i].w;
        al[i] = anchors[i].l;
        ah[i] = anchors[i].h;
        gxl[i] = gts[i].x - gts[i].l / 2;
        gxh[i] = gts[i].x + gts[i].l / 2;
        gyl[i] = gts[i].y - gts[i].w / 2;
        gyh[i] = gts[i].y + gts[i].w / 2;
        gzl[i] = gts[i].z - gts[i].h / 2;
        gzh[i] = gts[i].z + gts[i].h / 2;
        gvol[i] = gts[i].w * gts[i].l * gts[i].h;
    }
    Tensor cx = add(const_vec(acx), slice_col(box_residuals, 0));
    Tensor cy = add(const_vec(acy), slice_col(box_residuals, 1));
    Tensor cz = add(const_vec(acz), slice_col(box_residuals, 2));
    Tensor w = mul(const_vec(aw), exp_ew(slice_col(box_residuals, 3)));
    Tensor l = mul(const_vec(al), exp_ew(slice_col(box_residuals, 4)));
    Tensor h = mul(const_vec(ah), exp_ew(slice_col(box_residuals, 5)));

    auto axis_overlap = [](const Tensor& c, const Tensor& s, const Tensor& glo, const Tensor& ghi) {
        Tensor half = mul_scalar(s, 0.5);
        Tensor lo = max_ew(sub(c, half), glo);
        Tensor hi = min_ew(add(c, half), ghi);
        return relu(sub(hi, lo));
    };
    Tensor ix = axis_overlap(cx, l, const_vec(gxl), const_vec(gxh));
    Tensor iy = axis_overlap(cy, w, const_vec(gyl), const_vec(gyh));
    Tensor iz = axis_overlap(cz, h, const_vec(gzl), const_vec(gzh));
    Tensor inter = mul(mul(ix, iy), iz);
    Tensor vol_pred = mul(mul(w, l), h);
    Tensor uni = sub(add(vol_pred, const_vec(gvol)), inter);
    return div_ew(inter, uni);
}

}  // namespace

DetLossTerms det_loss(const DetectionSlices& outputs, const DetTargets& targets, double gamma) {
    const int n = outputs.cls.rows();
    if (static_cast<int>(targets.class_targets.size()) != n) {
        throw ContractError("det_loss: target/output count mismatch");
    }
    const int a = static_cast<int>(targets.assigned_rows.size());
    if (static_cast<int>(targets.anchors.size()) != a ||
        static_cast<int>(targets.gt_boxes.size()) != a) {
        throw ContractError("det_loss: assigned-row arrays misaligned");
    }

    DetLossTerms terms;
    terms.cls = mean(focal_ce_rows(outputs.cls, targets.class_targets, gamma));
    if (a == 0) {
        terms.iou = Tensor::scalar(0.0);
        terms.orient = Tensor::scalar(0.0);
        return terms;
    }

    Tensor assigned_box = gather_rows(outputs.box, targets.assigned_rows);
    Tensor iou = iou_graph(assigned_box, targets.anchors, targets.gt_boxes);
    terms.iou = mean(add_scalar(neg(iou), 1.0));

    std::vector<double> tsin(a), tcos(a);
    for (int i = 0; i < a; ++i) {
        const double dyaw = targets.gt_boxes[i].yaw - targets.anchors[i].yaw;
        tsin[i] = std::sin(dyaw);
        tcos[i] = std::cos(dyaw);
    }
    Tensor l1 = add(abs_ew(sub(slice_col(assigned_box, 6), const_vec(tsin))),
                    abs_ew(sub(slice_col(assigned_box, 7), const_vec(tcos))));
    terms.orient = mean(l1);
    return terms;
}

namespace {

void check_unit_rows(const Tensor& t, const char* what) {
    const int d = t.cols();
    for (int r = 0; r < t.rows(); ++r) {
        double sq = 0;
        for (int j = 0; j < d; ++j) {
            const double v = t.data()[static_cast<int64_t>(r) * d + j];
            sq += v * v;
        }
        if (std::fabs(std::sqrt(sq) - 1.0) > 1e-4) {
            throw ContractError(std::string(what) + ": embedding is not unit norm");
        }
    }
}

Tensor row_distances(const Tensor& a, const Tensor& b) {
    return sqrt_ew(row_sums(square(sub(a, b))));
}

}  // namespace

Tensor triplet_loss_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                         double alpha) {
    if (alpha <= 0) throw ConfigError("triplet: margin must be positive");
    check_unit_rows(anchors, "triplet");
    check_unit_rows(positives, "triplet");
    check_unit_rows(negatives, "triplet");
    Tensor d_ap = row_distances(anchors, positives);
    Tensor d_an = row_distances(anchors, negatives);
    return relu(add_scalar(sub(d_ap, d_an), alpha));
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double alpha) {
    if (anchor.rank() != 1 || positive.rank() != 1 || negative.rank() != 1) {
        throw ShapeError("triplet: rank-1 embeddings expected");
    }
    return triplet_loss_rows(as_row(anchor), as_row(positive), as_row(negative), alpha);  // [1]
}

std::vector<Triplet> mine_triplets(const std::vector<double>& embeddings, int dim,
                                   const std::vector<EmbeddingMeta>& metas,
                                   MiningStrategy strategy) {
    if (strategy != MiningStrategy::BatchHardCrossModal) {
        throw ConfigError("mine_triplets: unknown strategy");
    }
    const int n = static_cast<int>(metas.size());
    if (static_cast<int>(embeddings.size()) != n * dim) {
        throw ContractError("mine_triplets: embedding array size mismatch");
    }
    auto dist = [&](int i, int j) {
        double sq = 0;
        for (int k = 0; k < dim; ++k) {
            const double d = embeddings[static_cast<int64_t>(i) * dim + k] -
                             embeddings[static_cast<int64_t>(j) * dim + k];
            sq += d * d;
        }
        return std::sqrt(sq);
    };

    std::vector<Triplet> out;
    for (int i = 0; i < n; ++i) {
        int best_pos = -1, best_neg = -1;
        double pos_dist = -1.0, neg_dist = 1e300;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            if (metas[j].label == metas[i].label) {
                if (metas[j].modality == metas[i].modality) continue;
                const double d = dist(i, j);
                if (d > pos_dist) {  // strict: ties keep the lowest index
                    pos_dist = d;
                    best_pos = j;
                }
            } else {
                const double d = dist(i, j);
                if (d < neg_dist) {
                    neg_dist = d;
                    best_neg = j;
                }
            }
        }
        if (best_pos >= 0 && best_neg >= 0) out.push_back({i, best_pos, best_neg});
    }
    return out;
}

Tensor consistency_loss(const Tensor& z_t, const Tensor& z_t1) {
    if (!z_t.defined() || !z_t1.defined()) return Tensor::scalar(0.0);
    if (z_t.shape() != z_t1.shape()) {
        throw ContractError("consistency: pair shapes differ");
    }
    return mean(row_sums(square(sub(z_t, z_t1))));
}

TotalLoss total_loss(const DetLossTerms& det, const Tensor& metric, const Tensor& consistency,
                     const LossConfig& config) {
    config.validate();
    Tensor det_sum = add(add(det.cls, det.iou), det.orient);
    Tensor total = add(add(mul_scalar(det_sum, config.lambda_det),
                           mul_scalar(metric, config.lambda_met)),
                       mul_scalar(consistency, config.lambda_cons));
    TotalLoss out;
    out.total = total;
    out.breakdown.det_cls = det.cls.item();
    out.breakdown.det_iou = det.iou.item();
    out.breakdown.det_orient = det.orient.item();
    out.breakdown.metric = metric.item();
    out.breakdown.consistency = consistency.item();
    out.breakdown.total = total.item();
    return out;
}

}  // namespace peftdml
