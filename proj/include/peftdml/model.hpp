#pragma once

#include "peftdml/fusion.hpp"

namespace peftdml {

// Full PEFT detection model over one ParameterSet: frozen per-modality
// backbones + LoRA/adapters, trainable projections, fusion and head.
struct Model {
    ModelConfig config;
    std::array<EncoderStack, kNumModalities> encoders;
    std::array<ProjectionHead, kNumModalities> projections;
    FusionParams fusion;
    DetectHead detect;
};

Model init_model(ParameterSet& params, const ParameterSet& pretrained, const ModelConfig& config,
                 uint64_t seed);
Model attach_model(const ParameterSet& params, const ModelConfig& config);

// One frame of one scene record plus the modality mask to fuse under.
struct FrameItem {
    const SceneRecord* record = nullptr;
    int frame = 0;
    std::array<uint8_t, kNumModalities> mask{};
};

// Batched forward over the concatenated candidates of all items. Rows
// whose effective mask (item mask AND per-candidate validity) is empty
// are excluded from fusion and detection.
struct ForwardBatch {
    int total_rows = 0;
    std::vector<int> item_of_row;
    std::vector<int> cand_of_row;
    std::array<Tensor, kNumModalities> embeddings;  // [N x d] unit-norm rows
    std::vector<uint8_t> row_mask;                  // N x kNumModalities
    std::vector<int> observed_rows;                 // rows entering fusion
    Tensor fused;                                   // [O x d]
    DetectionSlices det;                            // over observed rows
};

ForwardBatch forward_frames(const Model& model, const std::vector<FrameItem>& items);

// bypasses every PEFT layer; reference path for the zero-init identity
Tensor backbone_embed(const Model& model, Modality modality, const Tensor& features);

}  // namespace peftdml
