#include "peftdml/fusion.hpp"

#include <cmath>

namespace peftdml {

FusionParams build_fusion(ParameterSet& params, const ModelConfig& config, uint64_t seed) {
    config.validate();
    const int d = config.embed_dim;
    Rng rng(stable_hash(seed, "fusion"));
    auto gaussian = [&](int n, double std) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal(0.0, std);
        return v;
    };
    FusionParams f;
    f.dim = d;
    f.q = params.create("fusion.q", {d}, gaussian(d, 1.0 / std::sqrt(d)));
    f.K = params.create("fusion.K", {d, d}, gaussian(d * d, 1.0 / std::sqrt(d)));
    f.V = params.create("fusion.V", {d, d}, gaussian(d * d, 0.25 / std::sqrt(d)));
    for (int m = 0; m < kNumModalities; ++m) {
        const std::string name = modality_name(static_cast<Modality>(m));
        f.gate_w[m] = params.create("fusion.gate." + name + ".w", {d}, gaussian(d, 1.0 / std::sqrt(d)));
        const double bias = modality_is_object_level(static_cast<Modality>(m)) ? 0.0 : -2.0;
        f.gate_b[m] = params.create("fusion.gate." + name + ".b", {1}, {bias});
    }
    return f;
}

FusionParams attach_fusion(const ParameterSet& params, const ModelConfig& config) {
    const int d = config.embed_dim;
    FusionParams f;
    f.dim = d;
    f.q = params.at("fusion.q");
    f.K = params.at("fusion.K");
    f.V = params.at("fusion.V");
    for (int m = 0; m < kNumModalities; ++m) {
        const std::string name = modality_name(static_cast<Modality>(m));
        f.gate_w[m] = params.at("fusion.gate." + name + ".w");
        f.gate_b[m] = params.at("fusion.gate." + name + ".b");
    }
    return f;
}

FusedBatch fuse_batch(const std::array<Tensor, kNumModalities>& Z,
                      const std::vector<uint8_t>& mask, const FusionParams& fusion, int n) {
    if (n <= 0) throw ContractError("fuse_batch: empty batch");
    if (static_cast<int>(mask.size()) != n * kNumModalities) {
        throw ShapeError("fuse_batch: mask size mismatch");
    }
    const int d = fusion.dim;
    for (int m = 0; m < kNumModalities; ++m) {
        bool needed = false;
        for (int i = 0; i < n; ++i) needed |= mask[i * kNumModalities + m] != 0;
        if (needed && !Z[m].defined()) {
            throw ContractError("fuse_batch: surviving modality without embeddings");
        }
        if (Z[m].defined() && (Z[m].rank() != 2 || Z[m].rows() != n || Z[m].cols() != d)) {
            throw ShapeError("fuse_batch: embedding shape mismatch");
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor zero_col = Tensor::zeros({n});
    std::vector<Tensor> scores, gate_cols;
    std::array<Tensor, kNumModalities> values;  // V z per modality
    for (int m = 0; m < kNumModalities; ++m) {
        if (Z[m].defined()) {
            Tensor keyed = matmul_nt(Z[m], fusion.K);
            scores.push_back(mul_scalar(matvec(keyed, fusion.q), scale));
            values[m] = matmul_nt(Z[m], fusion.V);
            gate_cols.push_back(
                sigmoid(add_scalar_tensor(matvec(Z[m], fusion.gate_w[m]), fusion.gate_b[m])));
        } else {
            scores.push_back(zero_col);
            gate_cols.push_back(zero_col);
        }
    }

    FusedBatch out;
    out.attention = masked_softmax_rows(stack_cols(scores), mask);

    std::vector<double> mask_values(mask.begin(), mask.end());
    Tensor mask_const = Tensor::of({n, kNumModalities}, std::move(mask_values));
    Tensor gates_raw = mul(stack_cols(gate_cols), mask_const);
    out.gates = scale_rows(gates_raw, reciprocal(row_sums(gates_raw)));

    Tensor combined;
    for (int m = 0; m < kNumModalities; ++m) {
        if (!Z[m].defined()) continue;
        Tensor term = add(scale_rows(values[m], slice_col(out.attention, m)),
                          scale_rows(Z[m], slice_col(out.gates, m)));
        combined = combined.defined() ? add(combined, term) : term;
    }
    out.fused = normalize_rows(combined);
    return out;
}

namespace {

// assembles the single-candidate listing into the batched layout
void build_single(const std::vector<ModalityEmbedding>& embeddings, const AvailabilityMask& mask,
                  int dim, std::array<Tensor, kNumModalities>& Z, std::vector<uint8_t>& row_mask) {
    if (!mask.any()) throw AvailabilityError("fuse: no modality available");
    std::array<bool, kNumModalities> supplied{};
    for (const auto& [modality, values] : embeddings) {
        const int m = static_cast<int>(modality);
        if (supplied[m]) throw ContractError("fuse: duplicate modality in listing");
        if (static_cast<int>(values.size()) != dim) throw ShapeError("fuse: embedding length mismatch");
        supplied[m] = true;
        Z[m] = Tensor::of({1, dim}, values);
    }
    row_mask.assign(kNumModalities, 0);
    for (int m = 0; m < kNumModalities; ++m) {
        if (mask.available[m]) {
            if (!supplied[m]) throw ContractError("fuse: surviving modality missing from listing");
            row_mask[m] = 1;
        }
    }
}

}  // namespace

std::array<double, kNumModalities> gate_weights(const std::vector<ModalityEmbedding>& embeddings,
                                                const AvailabilityMask& mask,
                                                const FusionParams& fusion) {
    std::array<Tensor, kNumModalities> Z;
    std::vector<uint8_t> row_mask;
    build_single(embeddings, mask, fusion.dim, Z, row_mask);
    FusedBatch fb = fuse_batch(Z, row_mask, fusion, 1);
    std::array<double, kNumModalities> out{};
    for (int m = 0; m < kNumModalities; ++m) out[m] = fb.gates.data()[m];
    return out;
}

std::vector<double> fuse(const std::vector<ModalityEmbedding>& embeddings,
                         const AvailabilityMask& mask, const FusionParams& fusion) {
    std::array<Tensor, kNumModalities> Z;
    std::vector<uint8_t> row_mask;
    build_single(embeddings, mask, fusion.dim, Z, row_mask);
    return fuse_batch(Z, row_mask, fusion, 1).fused.data();
}

DetectHead build_detect_head(ParameterSet& params, const ModelConfig& config, uint64_t seed) {
    DetectHead head;
    head.l1 = make_linear(params, "detect.l1", config.embed_dim + kGeometryDim,
                          config.detect_hidden, stable_hash(seed, "detect.l1"));
    head.l2 = make_linear(params, "detect.l2", config.detect_hidden, kDetOutputDim,
                          stable_hash(seed, "detect.l2"));
    return head;
}

DetectHead attach_detect_head(const ParameterSet& params, const ModelConfig& config) {
    DetectHead head;
    head.l1 = attach_linear(params, "detect.l1", config.embed_dim + kGeometryDim,
                            config.detect_hidden);
    head.l2 = attach_linear(params, "detect.l2", config.detect_hidden, kDetOutputDim);
    return head;
}

std::array<double, kGeometryDim> anchor_geometry(const Box3D& anchor) {
    // positions and sizes brought to O(1) scale for the MLP input
    return {anchor.x / 20.0, anchor.y / 20.0,  anchor.z,          anchor.w / 4.0,
            anchor.l / 12.0, anchor.h / 4.0,   std::sin(anchor.yaw), std::cos(anchor.yaw)};
}

DetectionSlices detect_batch(const DetectHead& head, const Tensor& fused, const Tensor& geometry) {
    Tensor x = concat_cols(fused, geometry);
    Tensor out = head.l2.forward(relu(head.l1.forward(x)));
    DetectionSlices s;
    const int c1 = kNumClasses + 1;
    s.cls = slice_cols(out, 0, c1);
    s.box = slice_cols(out, c1, c1 + kBoxResidualDim);
    s.vel = slice_cols(out, c1 + kBoxResidualDim, c1 + kBoxResidualDim + 2);
    s.attr = slice_cols(out, c1 + kBoxResidualDim + 2, kDetOutputDim);
    return s;
}

DetectionOutput detect(const DetectHead& head, const std::vector<double>& fused,
                       const CandidateAnchor& anchor) {
    const int d = head.l1.in - kGeometryDim;
    if (static_cast<int>(fused.size()) != d) throw ShapeError("detect: embedding length mismatch");
    Tensor f = Tensor::of({1, d}, fused);
    auto geom = anchor_geometry(anchor.box);
    Tensor g = Tensor::of({1, kGeometryDim}, std::vector<double>(geom.begin(), geom.end()));
    DetectionSlices s = detect_batch(head, f, g);
    DetectionOutput out;
    for (int j = 0; j <= kNumClasses; ++j) out.class_logits[j] = s.cls.data()[j];
    for (int j = 0; j < kBoxResidualDim; ++j) out.box_residuals[j] = s.box.data()[j];
    out.velocity = {s.vel.data()[0], s.vel.data()[1]};
    out.attribute_logit = s.attr.data()[0];
    return out;
}

Box3D decode_box(const Box3D& anchor, const std::array<double, kBoxResidualDim>& residuals,
                 const std::array<double, 2>& velocity) {
    for (double r : residuals) {
        if (!std::isfinite(r)) throw DomainError("decode_box: non-finite residual");
    }
    Box3D b = anchor;
    b.x += residuals[0];
    b.y += residuals[1];
    b.z += residuals[2];
    b.w *= std::exp(residuals[3]);
    b.l *= std::exp(residuals[4]);
    b.h *= std::exp(residuals[5]);
    b.yaw = wrap_angle(anchor.yaw + std::atan2(residuals[6], residuals[7]));
    b.vx = velocity[0];
    b.vy = velocity[1];
    return b;
}

}  // namespace peftdml
