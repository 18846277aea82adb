#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "peftdml/fusion.hpp"

using namespace peftdml;

namespace {

std::vector<double> unit_vec(Rng& rng, int d) {
    std::vector<double> v = oracles::random_vec(rng, d);
    double sq = 0;
    for (double x : v) sq += x * x;
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
    return v;
}

// independent scalar reimplementation of gating and fusion
struct ScalarOracle {
    const FusionParams& f;

    double gate_raw(int m, const std::vector<double>& z) const {
        double s = f.gate_b[m].data()[0];
        for (int j = 0; j < f.dim; ++j) s += f.gate_w[m].data()[j] * z[j];
        return 1.0 / (1.0 + std::exp(-s));
    }

    std::array<double, kNumModalities> gates(const std::array<std::vector<double>, kNumModalities>& z,
                                             const std::array<uint8_t, kNumModalities>& mask) const {
        std::array<double, kNumModalities> g{};
        double total = 0;
        for (int m = 0; m < kNumModalities; ++m) {
            if (mask[m]) {
                g[m] = gate_raw(m, z[m]);
                total += g[m];
            }
        }
        for (int m = 0; m < kNumModalities; ++m) g[m] = mask[m] ? g[m] / total : 0.0;
        return g;
    }

    std::vector<double> matvec(const Tensor& M, const std::vector<double>& z) const {
        std::vector<double> out(f.dim, 0.0);
        for (int i = 0; i < f.dim; ++i) {
            for (int j = 0; j < f.dim; ++j) out[i] += M.data()[i * f.dim + j] * z[j];
        }
        return out;
    }

    std::vector<double> fuse(const std::array<std::vector<double>, kNumModalities>& z,
                             const std::array<uint8_t, kNumModalities>& mask) const {
        std::array<double, kNumModalities> score{};
        double mx = -1e300;
        for (int m = 0; m < kNumModalities; ++m) {
            if (!mask[m]) continue;
            auto kz = matvec(f.K, z[m]);
            double s = 0;
            for (int j = 0; j < f.dim; ++j) s += f.q.data()[j] * kz[j];
            score[m] = s / std::sqrt(static_cast<double>(f.dim));
            mx = std::max(mx, score[m]);
        }
        double zsum = 0;
        std::array<double, kNumModalities> attn{};
        for (int m = 0; m < kNumModalities; ++m) {
            if (mask[m]) zsum += std::exp(score[m] - mx);
        }
        for (int m = 0; m < kNumModalities; ++m) {
            if (mask[m]) attn[m] = std::exp(score[m] - mx) / zsum;
        }
        auto g = gates(z, mask);
        std::vector<double> combined(f.dim, 0.0);
        for (int m = 0; m < kNumModalities; ++m) {
            if (!mask[m]) continue;
            auto vz = matvec(f.V, z[m]);
            for (int j = 0; j < f.dim; ++j) combined[j] += attn[m] * vz[j] + g[m] * z[m][j];
        }
        double sq = 0;
        for (double v : combined) sq += v * v;
        const double inv = 1.0 / std::sqrt(sq);
        for (double& v : combined) v *= inv;
        return combined;
    }
};

}  // namespace

TEST_CASE("gate_weights") {
    ModelConfig cfg;
    cfg.embed_dim = 32;
    ParameterSet ps;
    FusionParams fusion = build_fusion(ps, cfg, 3);
    Rng rng(4);

    SUBCASE("single survivor gets weight 1") {
        AvailabilityMask mask;
        mask[Modality::Radar] = 1;
        auto w = gate_weights({{Modality::Radar, unit_vec(rng, cfg.embed_dim)}}, mask, fusion);
        CHECK(w[static_cast<int>(Modality::Radar)] == doctest::Approx(1.0).epsilon(1e-12));
        for (int m = 0; m < kNumModalities; ++m) {
            if (m != static_cast<int>(Modality::Radar)) CHECK(w[m] == 0.0);
        }
    }
    SUBCASE("identical embeddings and gate params give uniform weights") {
        for (int m = 1; m < kNumModalities; ++m) {
            fusion.gate_w[m].data() = fusion.gate_w[0].data();
            fusion.gate_b[m].data() = fusion.gate_b[0].data();
        }
        auto z = unit_vec(rng, cfg.embed_dim);
        std::vector<ModalityEmbedding> embs;
        AvailabilityMask mask;
        for (int m = 0; m < 3; ++m) {
            embs.push_back({static_cast<Modality>(m), z});
            mask.available[m] = 1;
        }
        auto w = gate_weights(embs, mask, fusion);
        for (int m = 0; m < 3; ++m) CHECK(w[m] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
    SUBCASE("matches the scalar oracle within 1e-9") {
        ScalarOracle oracle{fusion};
        for (int trial = 0; trial < 50; ++trial) {
            std::array<std::vector<double>, kNumModalities> z;
            std::array<uint8_t, kNumModalities> m8{};
            std::vector<ModalityEmbedding> embs;
            AvailabilityMask mask;
            int survivors = 1 + rng.uniform_int(kNumModalities);
            for (int m = 0; m < kNumModalities; ++m) {
                z[m] = unit_vec(rng, cfg.embed_dim);
                embs.push_back({static_cast<Modality>(m), z[m]});
                if (m < survivors) {
                    mask.available[m] = 1;
                    m8[m] = 1;
                }
            }
            auto lib = gate_weights(embs, mask, fusion);
            auto ora = oracle.gates(z, m8);
            for (int m = 0; m < kNumModalities; ++m) CHECK(std::fabs(lib[m] - ora[m]) < 1e-9);
        }
    }
    SUBCASE("empty mask is an availability error") {
        AvailabilityMask mask;
        CHECK_THROWS_AS(gate_weights({{Modality::Lidar, unit_vec(rng, cfg.embed_dim)}}, mask, fusion),
                        AvailabilityError);
    }
}

TEST_CASE("fuse") {
    ModelConfig cfg;
    cfg.embed_dim = 32;
    ParameterSet ps;
    FusionParams fusion = build_fusion(ps, cfg, 13);
    Rng rng(14);
    ScalarOracle oracle{fusion};

    SUBCASE("single survivor reduces to normalize(V z + z)") {
        auto z = unit_vec(rng, cfg.embed_dim);
        AvailabilityMask mask;
        mask[Modality::Camera] = 1;
        auto fused = fuse({{Modality::Camera, z}}, mask, fusion);
        auto vz = oracle.matvec(fusion.V, z);
        for (int j = 0; j < cfg.embed_dim; ++j) vz[j] += z[j];
        double sq = 0;
        for (double v : vz) sq += v * v;
        for (int j = 0; j < cfg.embed_dim; ++j) {
            CHECK(fused[j] == doctest::Approx(vz[j] / std::sqrt(sq)).epsilon(1e-9));
        }
    }
    SUBCASE("invariant to listing order") {
        std::vector<ModalityEmbedding> embs;
        AvailabilityMask mask;
        for (int m = 0; m < kNumModalities; ++m) {
            embs.push_back({static_cast<Modality>(m), unit_vec(rng, cfg.embed_dim)});
            mask.available[m] = 1;
        }
        auto ref = fuse(embs, mask, fusion);
        std::vector<ModalityEmbedding> shuffled = {embs[3], embs[0], embs[4], embs[2], embs[1]};
        auto out = fuse(shuffled, mask, fusion);
        CHECK(ref == out);
    }
    SUBCASE("matches the scalar oracle") {
        for (int trial = 0; trial < 50; ++trial) {
            std::array<std::vector<double>, kNumModalities> z;
            std::array<uint8_t, kNumModalities> m8{};
            std::vector<ModalityEmbedding> embs;
            AvailabilityMask mask;
            for (int m = 0; m < kNumModalities; ++m) {
                z[m] = unit_vec(rng, cfg.embed_dim);
                embs.push_back({static_cast<Modality>(m), z[m]});
            }
            const int pattern = 1 + rng.uniform_int(31);
            for (int m = 0; m < kNumModalities; ++m) {
                if (pattern & (1 << m)) {
                    mask.available[m] = 1;
                    m8[m] = 1;
                }
            }
            auto lib = fuse(embs, mask, fusion);
            auto ora = oracle.fuse(z, m8);
            for (int j = 0; j < cfg.embed_dim; ++j) CHECK(std::fabs(lib[j] - ora[j]) < 1e-9);
        }
    }
    SUBCASE("dropout-subset equivalence over all 31 subsets") {
        std::array<std::vector<double>, kNumModalities> z;
        for (int m = 0; m < kNumModalities; ++m) z[m] = unit_vec(rng, cfg.embed_dim);
        for (int pattern = 1; pattern < 32; ++pattern) {
            AvailabilityMask mask;
            std::vector<ModalityEmbedding> all, subset;
            for (int m = 0; m < kNumModalities; ++m) {
                all.push_back({static_cast<Modality>(m), z[m]});
                if (pattern & (1 << m)) {
                    mask.available[m] = 1;
                    subset.push_back({static_cast<Modality>(m), z[m]});
                }
            }
            auto with_all = fuse(all, mask, fusion);
            auto with_subset = fuse(subset, mask, fusion);
            for (int j = 0; j < cfg.embed_dim; ++j) {
                CHECK(std::fabs(with_all[j] - with_subset[j]) < 1e-9);
            }
        }
    }
    SUBCASE("attention and gates sum to 1 over survivors, zero elsewhere") {
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 3;
            std::array<Tensor, kNumModalities> Z;
            std::vector<uint8_t> mask(n * kNumModalities, 0);
            for (int m = 0; m < kNumModalities; ++m) {
                std::vector<double> flat;
                for (int r = 0; r < n; ++r) {
                    auto u = unit_vec(rng, cfg.embed_dim);
                    flat.insert(flat.end(), u.begin(), u.end());
                }
                Z[m] = Tensor::of({n, cfg.embed_dim}, flat);
            }
            for (int r = 0; r < n; ++r) {
                const int pattern = 1 + rng.uniform_int(31);
                for (int m = 0; m < kNumModalities; ++m) {
                    mask[r * kNumModalities + m] = (pattern >> m) & 1;
                }
            }
            FusedBatch fb = fuse_batch(Z, mask, fusion, n);
            for (int r = 0; r < n; ++r) {
                double asum = 0, gsum = 0;
                for (int m = 0; m < kNumModalities; ++m) {
                    const double a = fb.attention.data()[r * kNumModalities + m];
                    const double g = fb.gates.data()[r * kNumModalities + m];
                    if (!mask[r * kNumModalities + m]) {
                        CHECK(a == 0.0);
                        CHECK(g == 0.0);
                    }
                    asum += a;
                    gsum += g;
                }
                CHECK(std::fabs(asum - 1.0) < 1e-9);
                CHECK(std::fabs(gsum - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("fusion gradients through fuse and detect") {
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.hidden = 12;
    ParameterSet ps;
    FusionParams fusion = build_fusion(ps, cfg, 23);
    DetectHead head = build_detect_head(ps, cfg, 24);
    Rng rng(25);

    const int n = 4;
    std::array<Tensor, kNumModalities> Z;
    for (int m = 0; m < kNumModalities; ++m) {
        std::vector<double> flat;
        for (int r = 0; r < n; ++r) {
            auto u = unit_vec(rng, cfg.embed_dim);
            flat.insert(flat.end(), u.begin(), u.end());
        }
        Z[m] = Tensor::of({n, cfg.embed_dim}, flat);
    }
    std::vector<uint8_t> mask(n * kNumModalities, 0);
    for (int r = 0; r < n; ++r) {
        const int pattern = 1 + rng.uniform_int(31);
        for (int m = 0; m < kNumModalities; ++m) mask[r * kNumModalities + m] = (pattern >> m) & 1;
    }
    std::vector<double> geom = oracles::random_vec(rng, n * kGeometryDim, -1, 1);
    std::vector<double> w = oracles::random_vec(rng, n * kDetOutputDim);

    auto report = grad_check(
        [&] {
            FusedBatch fb = fuse_batch(Z, mask, fusion, n);
            Tensor g = Tensor::of({n, kGeometryDim}, geom);
            DetectionSlices s = detect_batch(head, fb.fused, g);
            Tensor all = concat_cols(concat_cols(s.cls, s.box), concat_cols(s.vel, s.attr));
            return sum(mul(all, Tensor::of({n, kDetOutputDim}, w)));
        },
        ps, 1e-5, 1e-4);
    CHECK(report.pass);
    CHECK(report.entries.size() == ps.trainable_paths().size());
}

TEST_CASE("detect head behavior") {
    ModelConfig cfg;
    cfg.embed_dim = 32;
    ParameterSet ps;
    DetectHead head = build_detect_head(ps, cfg, 33);
    Rng rng(34);

    CandidateAnchor anchor;
    anchor.box = {3.0, -2.0, 0.8, 1.9, 4.6, 1.7, 0.4, 0, 0};

    SUBCASE("finite outputs over 1000 random inputs") {
        for (int trial = 0; trial < 1000; ++trial) {
            auto fused = unit_vec(rng, cfg.embed_dim);
            DetectionOutput out = detect(head, fused, anchor);
            for (double v : out.class_logits) CHECK(std::isfinite(v));
            for (double v : out.box_residuals) CHECK(std::isfinite(v));
            for (double v : out.velocity) CHECK(std::isfinite(v));
            CHECK(std::isfinite(out.attribute_logit));
        }
    }
    SUBCASE("purity: identical inputs give identical outputs") {
        auto fused = unit_vec(rng, cfg.embed_dim);
        DetectionOutput a = detect(head, fused, anchor);
        DetectionOutput b = detect(head, fused, anchor);
        CHECK(a.class_logits == b.class_logits);
        CHECK(a.box_residuals == b.box_residuals);
        CHECK(a.velocity == b.velocity);
        CHECK(a.attribute_logit == b.attribute_logit);
    }
}

TEST_CASE("decode_box") {
    Box3D anchor = {1.0, 2.0, 0.9, 2.0, 4.0, 1.5, 0.7, 0, 0};

    SUBCASE("zero residuals keep the anchor") {
        Box3D out = decode_box(anchor, {0, 0, 0, 0, 0, 0, 0, 1}, {0.5, -0.5});
        CHECK(out.x == anchor.x);
        CHECK(out.w == anchor.w);
        CHECK(out.yaw == doctest::Approx(anchor.yaw));
        CHECK(out.vx == 0.5);
    }
    SUBCASE("log-width residual doubles the width") {
        Box3D out = decode_box(anchor, {0, 0, 0, std::log(2.0), 0, 0, 0, 1}, {0, 0});
        CHECK(out.w == doctest::Approx(4.0));
        CHECK(out.l == doctest::Approx(4.0));
    }
    SUBCASE("yaw always wraps into range") {
        Rng rng(35);
        for (int trial = 0; trial < 500; ++trial) {
            std::array<double, kBoxResidualDim> res{};
            for (auto& r : res) r = rng.uniform(-3, 3);
            Box3D out = decode_box(anchor, res, {0, 0});
            CHECK(out.yaw >= -3.14159265358979323846);
            CHECK(out.yaw < 3.14159265358979323846);
        }
    }
    SUBCASE("non-finite residuals rejected") {
        CHECK_THROWS_AS(decode_box(anchor, {0, 0, 0, 0, 0, 0, 0, std::nan("")}, {0, 0}), DomainError);
    }
}
