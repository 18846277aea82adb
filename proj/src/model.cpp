#include "peftdml/model.hpp"

namespace peftdml {

Model init_model(ParameterSet& params, const ParameterSet& pretrained, const ModelConfig& config,
                 uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    for (int i = 0; i < kNumModalities; ++i) {
        const Modality mod = static_cast<Modality>(i);
        m.encoders[i] = build_encoder_stack(params, pretrained, mod, config, stable_hash(seed, 10 + i));
        m.projections[i] = build_projection(params, mod, config, stable_hash(seed, 20 + i));
    }
    m.fusion = build_fusion(params, config, stable_hash(seed, 30));
    m.detect = build_detect_head(params, config, stable_hash(seed, 31));
    return m;
}

Model attach_model(const ParameterSet& params, const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    for (int i = 0; i < kNumModalities; ++i) {
        const Modality mod = static_cast<Modality>(i);
        m.encoders[i] = attach_encoder_stack(params, mod, config);
        m.projections[i] = attach_projection(params, mod, config);
    }
    m.fusion = attach_fusion(params, config);
    m.detect = attach_detect_head(params, config);
    return m;
}

ForwardBatch forward_frames(const Model& model, const std::vector<FrameItem>& items) {
    if (items.empty()) throw ContractError("forward_frames: empty batch");
    ForwardBatch fb;
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        if (item.record == nullptr || item.frame < 0 || item.frame > 1) {
            throw ContractError("forward_frames: bad frame item");
        }
        const int n = static_cast<int>(item.record->candidates[item.frame].size());
        for (int c = 0; c < n; ++c) {
            fb.item_of_row.push_back(static_cast<int>(i));
            fb.cand_of_row.push_back(c);
        }
        fb.total_rows += n;
    }
    const int N = fb.total_rows;

    // effective mask: item-level modality mask AND per-candidate validity
    fb.row_mask.assign(static_cast<size_t>(N) * kNumModalities, 0);
    for (int r = 0; r < N; ++r) {
        const auto& item = items[fb.item_of_row[r]];
        for (int m = 0; m < kNumModalities; ++m) {
            if (!item.mask[m]) continue;
            const auto& feats = item.record->features[item.frame][m];
            if (feats.candidate_valid[fb.cand_of_row[r]]) fb.row_mask[r * kNumModalities + m] = 1;
        }
    }

    // encode + project every row of every modality; fusion masks the rest
    for (int m = 0; m < kNumModalities; ++m) {
        const int dim = kModalityDims[m];
        std::vector<double> flat;
        flat.reserve(static_cast<size_t>(N) * dim);
        for (int r = 0; r < N; ++r) {
            const auto& item = items[fb.item_of_row[r]];
            const auto& feats = item.record->features[item.frame][m];
            const double* row = feats.row(fb.cand_of_row[r]);
            flat.insert(flat.end(), row, row + dim);
        }
        Tensor x = Tensor::of({N, dim}, std::move(flat));
        fb.embeddings[m] = model.projections[m].forward(model.encoders[m].forward(x));
    }

    for (int r = 0; r < N; ++r) {
        bool any = false;
        for (int m = 0; m < kNumModalities; ++m) any |= fb.row_mask[r * kNumModalities + m] != 0;
        if (any) fb.observed_rows.push_back(r);
    }
    if (fb.observed_rows.empty()) throw AvailabilityError("forward_frames: no observable candidate");

    const int O = static_cast<int>(fb.observed_rows.size());
    std::array<Tensor, kNumModalities> Z;
    std::vector<uint8_t> mask(static_cast<size_t>(O) * kNumModalities);
    for (int o = 0; o < O; ++o) {
        for (int m = 0; m < kNumModalities; ++m) {
            mask[o * kNumModalities + m] = fb.row_mask[fb.observed_rows[o] * kNumModalities + m];
        }
    }
    for (int m = 0; m < kNumModalities; ++m) {
        Z[m] = gather_rows(fb.embeddings[m], fb.observed_rows);
    }
    fb.fused = fuse_batch(Z, mask, model.fusion, O).fused;

    std::vector<double> geom;
    geom.reserve(static_cast<size_t>(O) * kGeometryDim);
    for (int o = 0; o < O; ++o) {
        const int r = fb.observed_rows[o];
        const auto& item = items[fb.item_of_row[r]];
        const auto g = anchor_geometry(item.record->candidates[item.frame][fb.cand_of_row[r]].box);
        geom.insert(geom.end(), g.begin(), g.end());
    }
    fb.det = detect_batch(model.detect, fb.fused, Tensor::of({O, kGeometryDim}, std::move(geom)));
    return fb;
}

Tensor backbone_embed(const Model& model, Modality modality, const Tensor& features) {
    const int m = static_cast<int>(modality);
    return normalize_rows(
        model.projections[m].lin.forward(model.encoders[m].backbone_forward(features)));
}

}  // namespace peftdml
