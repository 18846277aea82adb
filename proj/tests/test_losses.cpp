#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "peftdml/losses.hpp"

using namespace peftdml;

namespace {

// voxel-counting IoU; exact when box edges lie on the voxel grid
double voxel_iou(const Box3D& a, const Box3D& b, double res) {
    auto lo = [](const Box3D& t, int axis) {
        return axis == 0 ? t.x - t.l / 2 : (axis == 1 ? t.y - t.w / 2 : t.z - t.h / 2);
    };
    auto hi = [](const Box3D& t, int axis) {
        return axis == 0 ? t.x + t.l / 2 : (axis == 1 ? t.y + t.w / 2 : t.z + t.h / 2);
    };
    double blo[3], bhi[3];
    for (int k = 0; k < 3; ++k) {
        blo[k] = std::min(lo(a, k), lo(b, k));
        bhi[k] = std::max(hi(a, k), hi(b, k));
    }
    auto inside = [&](const Box3D& t, double x, double y, double z) {
        return x >= lo(t, 0) && x <= hi(t, 0) && y >= lo(t, 1) && y <= hi(t, 1) && z >= lo(t, 2) &&
               z <= hi(t, 2);
    };
    long long inter = 0, uni = 0;
    const int nx = static_cast<int>(std::ceil((bhi[0] - blo[0]) / res));
    const int ny = static_cast<int>(std::ceil((bhi[1] - blo[1]) / res));
    const int nz = static_cast<int>(std::ceil((bhi[2] - blo[2]) / res));
    for (int i = 0; i < nx; ++i) {
        const double x = blo[0] + (i + 0.5) * res;
        for (int j = 0; j < ny; ++j) {
            const double y = blo[1] + (j + 0.5) * res;
            for (int k = 0; k < nz; ++k) {
                const double z = blo[2] + (k + 0.5) * res;
                const bool ia = inside(a, x, y, z), ib = inside(b, x, y, z);
                inter += ia && ib;
                uni += ia || ib;
            }
        }
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

Box3D grid_box(Rng& rng) {
    // centers on the 0.02 grid and sizes on the 0.04 grid keep every box
    // edge on a voxel boundary, making the 0.02 voxel oracle exact
    auto snap_center = [&](double lo, double hi) {
        return std::round(rng.uniform(lo, hi) * 50.0) / 50.0;
    };
    auto snap_size = [&](double lo, double hi) {
        return std::max(0.2, std::round(rng.uniform(lo, hi) * 25.0) / 25.0);
    };
    Box3D b;
    b.x = snap_center(-1.0, 1.0);
    b.y = snap_center(-1.0, 1.0);
    b.z = snap_center(0.2, 1.0);
    b.w = snap_size(0.2, 1.4);
    b.l = snap_size(0.2, 1.4);
    b.h = snap_size(0.2, 1.4);
    return b;
}

// exhaustive mining oracle per the batch-hard definition
std::vector<Triplet> mine_oracle(const std::vector<double>& emb, int dim,
                                 const std::vector<EmbeddingMeta>& metas) {
    const int n = static_cast<int>(metas.size());
    auto dist = [&](int i, int j) {
        double sq = 0;
        for (int k = 0; k < dim; ++k) {
            const double d = emb[i * dim + k] - emb[j * dim + k];
            sq += d * d;
        }
        return std::sqrt(sq);
    };
    std::vector<Triplet> out;
    for (int i = 0; i < n; ++i) {
        int bp = -1, bn = -1;
        for (int j = 0; j < n; ++j) {
            if (j == i || metas[j].label != metas[i].label || metas[j].modality == metas[i].modality)
                continue;
            if (bp < 0 || dist(i, j) > dist(i, bp)) bp = j;
        }
        for (int k = 0; k < n; ++k) {
            if (metas[k].label == metas[i].label) continue;
            if (bn < 0 || dist(i, k) < dist(i, bn)) bn = k;
        }
        if (bp >= 0 && bn >= 0) out.push_back({i, bp, bn});
    }
    return out;
}

std::vector<double> unit_vec(Rng& rng, int d) {
    auto v = oracles::random_vec(rng, d);
    double sq = 0;
    for (double x : v) sq += x * x;
    for (double& x : v) x /= std::sqrt(sq);
    return v;
}

// unit vector at a given angle in the plane of the first two coordinates
std::vector<double> planar_unit(double angle, int d) {
    std::vector<double> v(d, 0.0);
    v[0] = std::cos(angle);
    v[1] = std::sin(angle);
    return v;
}

}  // namespace

TEST_CASE("focal_ce") {
    SUBCASE("perfect prediction gives zero") {
        // logits so extreme that p_target is 1 up to rounding
        Tensor logits = Tensor::of({3}, {60.0, 0.0, 0.0});
        CHECK(focal_ce(logits, 0, 2.0).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("p=0.5 at gamma 2 gives 0.25 ln 2") {
        Tensor logits = Tensor::of({2}, {0.0, 0.0});
        CHECK(focal_ce(logits, 0, 2.0).item() == doctest::Approx(0.1733).epsilon(1e-3));
    }
    SUBCASE("gamma 0 reduces to cross-entropy") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            auto lv = oracles::random_vec(rng, 5, -3, 3);
            const int target = rng.uniform_int(5);
            Tensor logits = Tensor::of({5}, lv);
            double mx = *std::max_element(lv.begin(), lv.end());
            double z = 0;
            for (double v : lv) z += std::exp(v - mx);
            const double ce = -(lv[target] - mx - std::log(z));
            CHECK(focal_ce(logits, target, 0.0).item() == doctest::Approx(ce).epsilon(1e-10));
        }
    }
    SUBCASE("target out of range") {
        CHECK_THROWS_AS(focal_ce(Tensor::of({3}, {0, 0, 0}), 3, 2.0), ContractError);
    }
    SUBCASE("gradient vs finite differences") {
        Rng rng(4);
        Tensor logits = Tensor::of({4, 6}, oracles::random_vec(rng, 24, -2, 2), true);
        std::vector<int> targets = {0, 5, 2, 3};
        auto objective = [&] { return mean(focal_ce_rows(logits, targets, 2.0)); };
        backward(objective());
        auto fd = oracles::fd_gradient([&] { return objective().item(); }, logits);
        CHECK(oracles::max_rel_err(logits.grad(), fd) < 1e-4);
    }
}

TEST_CASE("iou_3d") {
    Box3D cube{0, 0, 0, 2, 2, 2, 0, 0, 0};
    SUBCASE("identical boxes") { CHECK(iou_3d(cube, cube) == doctest::Approx(1.0)); }
    SUBCASE("disjoint boxes") {
        Box3D far = cube;
        far.x = 10;
        CHECK(iou_3d(cube, far) == 0.0);
    }
    SUBCASE("unit-offset cubes give 1/15, matching the voxel oracle at 0.01") {
        Box3D shifted = cube;
        shifted.x = shifted.y = shifted.z = 1.0;
        const double analytic = iou_3d(cube, shifted);
        CHECK(analytic == doctest::Approx(1.0 / 15).epsilon(1e-6));
        CHECK(std::fabs(analytic - voxel_iou(cube, shifted, 0.01)) < 5e-4);
    }
    SUBCASE("symmetry and range on random grid boxes vs voxel oracle") {
        Rng rng(9);
        for (int trial = 0; trial < 12; ++trial) {
            Box3D a = grid_box(rng), b = grid_box(rng);
            const double ab = iou_3d(a, b);
            CHECK(ab == iou_3d(b, a));
            CHECK(ab >= 0.0);
            CHECK(ab <= 1.0);
            CHECK(std::fabs(ab - voxel_iou(a, b, 0.02)) < 5e-4);
        }
    }
    SUBCASE("nonpositive sizes rejected") {
        Box3D bad = cube;
        bad.w = 0;
        CHECK_THROWS_AS(iou_3d(cube, bad), DomainError);
    }
}

TEST_CASE("det_loss") {
    const int n = 6;
    Rng rng(11);

    auto random_slices = [&](std::vector<double>& cls_v, std::vector<double>& box_v) {
        cls_v = oracles::random_vec(rng, n * (kNumClasses + 1), -2, 2);
        box_v = oracles::random_vec(rng, n * kBoxResidualDim, -0.4, 0.4);
        DetectionSlices s;
        s.cls = Tensor::of({n, kNumClasses + 1}, cls_v);
        s.box = Tensor::of({n, kBoxResidualDim}, box_v);
        s.vel = Tensor::zeros({n, 2});
        s.attr = Tensor::zeros({n, 1});
        return s;
    };

    SUBCASE("perfect predictions give zero everywhere") {
        std::vector<double> cls_v(n * (kNumClasses + 1), 0.0);
        std::vector<double> box_v(n * kBoxResidualDim, 0.0);
        DetTargets t;
        for (int i = 0; i < n; ++i) {
            const int target = i % (kNumClasses + 1);
            cls_v[i * (kNumClasses + 1) + target] = 200.0;  // saturated softmax
            t.class_targets.push_back(target);
            box_v[i * kBoxResidualDim + 7] = 1.0;  // cos residual of an exact match
        }
        Box3D anchor{1, 1, 0.5, 1, 2, 1, 0.3, 0, 0};
        t.assigned_rows = {0, 1, 2};
        t.anchors = {anchor, anchor, anchor};
        t.gt_boxes = {anchor, anchor, anchor};
        DetectionSlices s;
        s.cls = Tensor::of({n, kNumClasses + 1}, cls_v);
        s.box = Tensor::of({n, kBoxResidualDim}, box_v);
        DetLossTerms terms = det_loss(s, t, 2.0);
        CHECK(terms.cls.item() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(terms.iou.item() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(terms.orient.item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("no assigned candidates uses the empty-mean convention") {
        std::vector<double> cls_v, box_v;
        DetectionSlices s = random_slices(cls_v, box_v);
        DetTargets t;
        for (int i = 0; i < n; ++i) t.class_targets.push_back(kNumClasses);
        DetLossTerms terms = det_loss(s, t, 2.0);
        CHECK(terms.iou.item() == 0.0);
        CHECK(terms.orient.item() == 0.0);
        CHECK(terms.cls.item() > 0.0);
    }
    SUBCASE("matches an independent scalar oracle") {
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<double> cls_v, box_v;
            DetectionSlices s = random_slices(cls_v, box_v);
            DetTargets t;
            for (int i = 0; i < n; ++i) t.class_targets.push_back(rng.uniform_int(kNumClasses + 1));
            for (int i = 0; i < 3; ++i) {
                t.assigned_rows.push_back(i * 2);
                Box3D anchor{rng.uniform(-2, 2), rng.uniform(-2, 2), 0.8,
                             rng.uniform(0.8, 2), rng.uniform(1, 4), rng.uniform(0.8, 2),
                             rng.uniform(-3, 3), 0, 0};
                Box3D gt = anchor;
                gt.x += rng.uniform(-0.5, 0.5);
                gt.y += rng.uniform(-0.5, 0.5);
                gt.w *= rng.uniform(0.8, 1.2);
                gt.yaw = wrap_angle(anchor.yaw + rng.uniform(-0.4, 0.4));
                t.anchors.push_back(anchor);
                t.gt_boxes.push_back(gt);
            }
            DetLossTerms terms = det_loss(s, t, 2.0);

            // scalar oracle: focal via raw loops, iou via decode_box + iou_3d
            const int k = kNumClasses + 1;
            double cls_acc = 0;
            for (int i = 0; i < n; ++i) {
                double mx = -1e300;
                for (int j = 0; j < k; ++j) mx = std::max(mx, cls_v[i * k + j]);
                double z = 0;
                for (int j = 0; j < k; ++j) z += std::exp(cls_v[i * k + j] - mx);
                const double logp = cls_v[i * k + t.class_targets[i]] - mx - std::log(z);
                const double p = std::exp(logp);
                cls_acc += -std::pow(1.0 - p, 2.0) * logp;
            }
            double iou_acc = 0, orient_acc = 0;
            for (size_t a = 0; a < t.assigned_rows.size(); ++a) {
                const int row = t.assigned_rows[a];
                std::array<double, kBoxResidualDim> res;
                for (int j = 0; j < kBoxResidualDim; ++j) res[j] = box_v[row * kBoxResidualDim + j];
                Box3D decoded = decode_box(t.anchors[a], res, {0, 0});
                decoded.yaw = t.anchors[a].yaw;  // iou term is yaw-ignored
                iou_acc += 1.0 - iou_3d(decoded, t.gt_boxes[a]);
                const double dyaw = t.gt_boxes[a].yaw - t.anchors[a].yaw;
                orient_acc += std::fabs(res[6] - std::sin(dyaw)) + std::fabs(res[7] - std::cos(dyaw));
            }
            CHECK(std::fabs(terms.cls.item() - cls_acc / n) < 1e-9);
            CHECK(std::fabs(terms.iou.item() - iou_acc / 3) < 1e-9);
            CHECK(std::fabs(terms.orient.item() - orient_acc / 3) < 1e-9);
            CHECK(terms.iou.item() >= 0.0);
            CHECK(terms.iou.item() <= 1.0);
        }
    }
    SUBCASE("count mismatch rejected") {
        std::vector<double> cls_v, box_v;
        DetectionSlices s = random_slices(cls_v, box_v);
        DetTargets t;
        t.class_targets = {0, 1};
        CHECK_THROWS_AS(det_loss(s, t, 2.0), ContractError);
    }
    SUBCASE("gradient through iou and orientation terms") {
        std::vector<double> cls_v, box_v;
        DetectionSlices s = random_slices(cls_v, box_v);
        Tensor box_leaf = Tensor::of({n, kBoxResidualDim}, box_v, true);
        DetTargets t;
        for (int i = 0; i < n; ++i) t.class_targets.push_back(rng.uniform_int(kNumClasses + 1));
        for (int i = 0; i < 4; ++i) {
            Box3D anchor{0.5 * i, -0.3 * i, 0.8, 1.2, 2.5, 1.1, 0.2 * i, 0, 0};
            Box3D gt = anchor;
            gt.x += 0.3;
            gt.yaw = wrap_angle(anchor.yaw + 0.2);
            t.assigned_rows.push_back(i);
            t.anchors.push_back(anchor);
            t.gt_boxes.push_back(gt);
        }
        auto objective = [&] {
            DetectionSlices s2 = s;
            s2.box = box_leaf;
            DetLossTerms terms = det_loss(s2, t, 2.0);
            return add(terms.iou, terms.orient);
        };
        backward(objective());
        auto fd = oracles::fd_gradient([&] { return objective().item(); }, box_leaf);
        CHECK(oracles::max_rel_err(box_leaf.grad(), fd) < 1e-4);
    }
}

TEST_CASE("triplet_loss") {
    const int d = 8;
    SUBCASE("equal distances give the margin") {
        Tensor a = Tensor::of({d}, planar_unit(0.0, d));
        Tensor p = Tensor::of({d}, planar_unit(0.8, d));
        Tensor n = Tensor::of({d}, planar_unit(-0.8, d));
        CHECK(triplet_loss(a, p, n, 0.3).item() == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("inactive hinge at d(a,p)=0.2, d(a,n)=0.9") {
        // chord length 2 sin(theta/2) inverted for the target distances
        const double tp = 2 * std::asin(0.1), tn = 2 * std::asin(0.45);
        Tensor a = Tensor::of({d}, planar_unit(0.0, d));
        Tensor p = Tensor::of({d}, planar_unit(tp, d));
        Tensor n = Tensor::of({d}, planar_unit(tn, d));
        CHECK(triplet_loss(a, p, n, 0.3).item() == 0.0);
    }
    SUBCASE("active hinge at d(a,p)=1.0, d(a,n)=0.5") {
        const double tp = 2 * std::asin(0.5), tn = 2 * std::asin(0.25);
        Tensor a = Tensor::of({d}, planar_unit(0.0, d));
        Tensor p = Tensor::of({d}, planar_unit(tp, d));
        Tensor n = Tensor::of({d}, planar_unit(tn, d));
        CHECK(triplet_loss(a, p, n, 0.3).item() == doctest::Approx(0.8).epsilon(1e-9));
    }
    SUBCASE("non-unit input rejected") {
        Tensor a = Tensor::of({d}, std::vector<double>(d, 0.5));
        Tensor u = Tensor::of({d}, planar_unit(0.3, d));
        CHECK_THROWS_AS(triplet_loss(a, u, u, 0.3), ContractError);
    }
    SUBCASE("nonnegative, zero iff margin satisfied (property)") {
        Rng rng(21);
        for (int trial = 0; trial < 200; ++trial) {
            Tensor a = Tensor::of({d}, unit_vec(rng, d));
            Tensor p = Tensor::of({d}, unit_vec(rng, d));
            Tensor n = Tensor::of({d}, unit_vec(rng, d));
            const double loss = triplet_loss(a, p, n, 0.3).item();
            CHECK(loss >= 0.0);
            auto dist = [&](const Tensor& u, const Tensor& v) {
                double sq = 0;
                for (int j = 0; j < d; ++j) {
                    sq += (u.data()[j] - v.data()[j]) * (u.data()[j] - v.data()[j]);
                }
                return std::sqrt(sq);
            };
            const bool satisfied = dist(a, p) + 0.3 <= dist(a, n);
            CHECK((loss == 0.0) == satisfied);
        }
    }
    SUBCASE("gradient vs finite differences") {
        Rng rng(22);
        Tensor A = Tensor::of({3, d}, [&] {
            std::vector<double> v;
            for (int i = 0; i < 3; ++i) {
                auto u = unit_vec(rng, d);
                v.insert(v.end(), u.begin(), u.end());
            }
            return v;
        }(), true);
        std::vector<double> pv, nv;
        for (int i = 0; i < 3; ++i) {
            auto u = unit_vec(rng, d);
            pv.insert(pv.end(), u.begin(), u.end());
            u = unit_vec(rng, d);
            nv.insert(nv.end(), u.begin(), u.end());
        }
        Tensor P = Tensor::of({3, d}, pv);
        Tensor N = Tensor::of({3, d}, nv);
        // unit-norm check tolerates the +-1e-5 probes of the finite differences
        auto objective = [&] { return mean(triplet_loss_rows(normalize_rows(A), P, N, 0.3)); };
        backward(objective());
        auto fd = oracles::fd_gradient([&] { return objective().item(); }, A);
        CHECK(oracles::max_rel_err(A.grad(), fd) < 1e-4);
    }
}

TEST_CASE("mine_triplets") {
    const int d = 4;
    SUBCASE("single class yields nothing") {
        Rng rng(31);
        std::vector<double> emb;
        std::vector<EmbeddingMeta> metas;
        for (int i = 0; i < 5; ++i) {
            auto u = unit_vec(rng, d);
            emb.insert(emb.end(), u.begin(), u.end());
            metas.push_back({2, i % 3});
        }
        CHECK(mine_triplets(emb, d, metas, MiningStrategy::BatchHardCrossModal).empty());
    }
    SUBCASE("single modality yields nothing") {
        Rng rng(32);
        std::vector<double> emb;
        std::vector<EmbeddingMeta> metas;
        for (int i = 0; i < 6; ++i) {
            auto u = unit_vec(rng, d);
            emb.insert(emb.end(), u.begin(), u.end());
            metas.push_back({i % 2, 1});
        }
        CHECK(mine_triplets(emb, d, metas, MiningStrategy::BatchHardCrossModal).empty());
    }
    SUBCASE("hand-constructed batch matches the exhaustive oracle") {
        // six embeddings on the unit circle, two classes, two modalities
        std::vector<double> emb;
        std::vector<EmbeddingMeta> metas = {{0, 0}, {0, 1}, {0, 1}, {1, 0}, {1, 1}, {1, 0}};
        const double angles[6] = {0.0, 0.4, 1.2, 2.2, 2.6, 3.0};
        for (double a : angles) {
            auto u = planar_unit(a, d);
            emb.insert(emb.end(), u.begin(), u.end());
        }
        auto lib = mine_triplets(emb, d, metas, MiningStrategy::BatchHardCrossModal);
        auto ora = mine_oracle(emb, d, metas);
        CHECK(lib == ora);
        REQUIRE(!lib.empty());
        // anchor 0: hardest positive is the farther same-class other-modality (index 2),
        // nearest negative is index 3
        CHECK(lib[0].anchor == 0);
        CHECK(lib[0].positive == 2);
        CHECK(lib[0].negative == 3);
    }
    SUBCASE("random batches match the oracle (property)") {
        Rng rng(33);
        for (int trial = 0; trial < 100; ++trial) {
            const int n = 2 + rng.uniform_int(12);
            std::vector<double> emb;
            std::vector<EmbeddingMeta> metas;
            for (int i = 0; i < n; ++i) {
                auto u = unit_vec(rng, d);
                emb.insert(emb.end(), u.begin(), u.end());
                metas.push_back({rng.uniform_int(3), rng.uniform_int(3)});
            }
            CHECK(mine_triplets(emb, d, metas, MiningStrategy::BatchHardCrossModal) ==
                  mine_oracle(emb, d, metas));
        }
    }
}

TEST_CASE("consistency_loss") {
    const int d = 6;
    SUBCASE("identical pairs give zero") {
        Rng rng(41);
        std::vector<double> v;
        for (int i = 0; i < 4; ++i) {
            auto u = unit_vec(rng, d);
            v.insert(v.end(), u.begin(), u.end());
        }
        Tensor zt = Tensor::of({4, d}, v);
        Tensor zt1 = Tensor::of({4, d}, v);
        CHECK(consistency_loss(zt, zt1).item() == 0.0);
    }
    SUBCASE("orthogonal unit pair gives 2") {
        Tensor zt = Tensor::of({1, d}, planar_unit(0.0, d));
        Tensor zt1 = Tensor::of({1, d}, [&] {
            std::vector<double> u(d, 0.0);
            u[1] = 1.0;
            return u;
        }());
        CHECK(consistency_loss(zt, zt1).item() == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("no pairs gives zero") { CHECK(consistency_loss(Tensor(), Tensor()).item() == 0.0); }
    SUBCASE("random batch matches scalar oracle and stays within [0,4]") {
        Rng rng(42);
        for (int trial = 0; trial < 30; ++trial) {
            const int p = 1 + rng.uniform_int(6);
            std::vector<double> a, b;
            for (int i = 0; i < p; ++i) {
                auto u = unit_vec(rng, d);
                a.insert(a.end(), u.begin(), u.end());
                u = unit_vec(rng, d);
                b.insert(b.end(), u.begin(), u.end());
            }
            Tensor zt = Tensor::of({p, d}, a);
            Tensor zt1 = Tensor::of({p, d}, b);
            double acc = 0;
            for (int i = 0; i < p; ++i) {
                double sq = 0;
                for (int j = 0; j < d; ++j) {
                    sq += (a[i * d + j] - b[i * d + j]) * (a[i * d + j] - b[i * d + j]);
                }
                acc += sq;
            }
            const double lib = consistency_loss(zt, zt1).item();
            CHECK(std::fabs(lib - acc / p) < 1e-9);
            CHECK(lib >= 0.0);
            CHECK(lib <= 4.0 + 1e-12);
        }
    }
    SUBCASE("mismatched pair shapes rejected") {
        Tensor zt = Tensor::zeros({2, d});
        Tensor zt1 = Tensor::zeros({3, d});
        CHECK_THROWS_AS(consistency_loss(zt, zt1), ContractError);
    }
}

TEST_CASE("total_loss") {
    auto make_terms = [](double c, double i, double o) {
        DetLossTerms t;
        t.cls = Tensor::scalar(c);
        t.iou = Tensor::scalar(i);
        t.orient = Tensor::scalar(o);
        return t;
    };
    SUBCASE("all zero terms give zero") {
        LossConfig cfg;
        auto out = total_loss(make_terms(0, 0, 0), Tensor::scalar(0), Tensor::scalar(0), cfg);
        CHECK(out.breakdown.total == 0.0);
    }
    SUBCASE("lambda (1,0,0) masks everything but detection") {
        LossConfig cfg;
        cfg.lambda_det = 1;
        cfg.lambda_met = 0;
        cfg.lambda_cons = 0;
        auto out = total_loss(make_terms(0.5, 0.25, 0.125), Tensor::scalar(9), Tensor::scalar(7), cfg);
        CHECK(out.breakdown.total == doctest::Approx(0.875).epsilon(1e-12));
    }
    SUBCASE("breakdown invariant and linearity in lambda") {
        Rng rng(51);
        for (int trial = 0; trial < 40; ++trial) {
            LossConfig cfg;
            cfg.lambda_det = rng.uniform(0, 2);
            cfg.lambda_met = rng.uniform(0, 2);
            cfg.lambda_cons = rng.uniform(0, 2);
            const double c = rng.uniform(0, 1), i = rng.uniform(0, 1), o = rng.uniform(0, 1);
            const double met = rng.uniform(0, 1), cons = rng.uniform(0, 4);
            auto out = total_loss(make_terms(c, i, o), Tensor::scalar(met), Tensor::scalar(cons), cfg);
            const double expected = cfg.lambda_det * (c + i + o) + cfg.lambda_met * met +
                                    cfg.lambda_cons * cons;
            CHECK(std::fabs(out.breakdown.total - expected) < 1e-9);

            LossConfig doubled = cfg;
            doubled.lambda_det *= 2;
            doubled.lambda_met *= 2;
            doubled.lambda_cons *= 2;
            auto out2 =
                total_loss(make_terms(c, i, o), Tensor::scalar(met), Tensor::scalar(cons), doubled);
            CHECK(std::fabs(out2.breakdown.total - 2 * out.breakdown.total) < 1e-9);
        }
    }
    SUBCASE("negative lambda rejected") {
        LossConfig cfg;
        cfg.lambda_met = -0.1;
        CHECK_THROWS_AS(
            total_loss(make_terms(0, 0, 0), Tensor::scalar(0), Tensor::scalar(0), cfg), ConfigError);
    }
}
