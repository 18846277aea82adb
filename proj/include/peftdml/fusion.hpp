#pragma once

#include <array>
#include <utility>
#include <vector>

#include "peftdml/encoder.hpp"

namespace peftdml {

// Masked cross-attention (learnable query, key/value projections) plus
// sigmoid gates normalized over the surviving modalities.
struct FusionParams {
    Tensor q;                                    // [d]
    Tensor K;                                    // [d x d]
    Tensor V;                                    // [d x d]
    std::array<Tensor, kNumModalities> gate_w;   // [d]
    std::array<Tensor, kNumModalities> gate_b;   // [1]
    int dim = 0;
};

FusionParams build_fusion(ParameterSet& params, const ModelConfig& config, uint64_t seed);
FusionParams attach_fusion(const ParameterSet& params, const ModelConfig& config);

// Batched fusion. Z[m] holds [n x d] embeddings (undefined = modality not
// supplied); mask is n x kNumModalities, row-major; every row needs at
// least one survivor and a defined Z for each surviving entry.
struct FusedBatch {
    Tensor fused;      // [n x d], unit-norm rows
    Tensor attention;  // [n x kNumModalities]
    Tensor gates;      // [n x kNumModalities], rows sum to 1 over survivors
};
FusedBatch fuse_batch(const std::array<Tensor, kNumModalities>& Z,
                      const std::vector<uint8_t>& mask, const FusionParams& fusion, int n);

// Single-candidate surface; listing order of the (modality, embedding)
// pairs does not affect the result.
using ModalityEmbedding = std::pair<Modality, std::vector<double>>;
std::array<double, kNumModalities> gate_weights(const std::vector<ModalityEmbedding>& embeddings,
                                                const AvailabilityMask& mask,
                                                const FusionParams& fusion);
std::vector<double> fuse(const std::vector<ModalityEmbedding>& embeddings,
                         const AvailabilityMask& mask, const FusionParams& fusion);

inline constexpr int kBoxResidualDim = 8;  // dx,dy,dz,dlog w,dlog l,dlog h,sin,cos
inline constexpr int kGeometryDim = 8;     // x,y,z,w,l,h,sin yaw,cos yaw (scaled)
inline constexpr int kDetOutputDim = (kNumClasses + 1) + kBoxResidualDim + 2 + 1;

struct DetectionOutput {
    std::array<double, kNumClasses + 1> class_logits{};  // last entry = background
    std::array<double, kBoxResidualDim> box_residuals{};
    std::array<double, 2> velocity{};
    double attribute_logit = 0.0;
};

// 2-layer MLP over fused embedding concatenated with anchor geometry.
struct DetectHead {
    LinearLayer l1;
    LinearLayer l2;
};
DetectHead build_detect_head(ParameterSet& params, const ModelConfig& config, uint64_t seed);
DetectHead attach_detect_head(const ParameterSet& params, const ModelConfig& config);

std::array<double, kGeometryDim> anchor_geometry(const Box3D& anchor);

struct DetectionSlices {
    Tensor cls;   // [n x (C+1)]
    Tensor box;   // [n x 8]
    Tensor vel;   // [n x 2]
    Tensor attr;  // [n x 1]
};
DetectionSlices detect_batch(const DetectHead& head, const Tensor& fused, const Tensor& geometry);
DetectionOutput detect(const DetectHead& head, const std::vector<double>& fused,
                       const CandidateAnchor& anchor);

// center += delta; size *= exp(dlog); yaw += atan2(sin, cos), wrapped.
Box3D decode_box(const Box3D& anchor, const std::array<double, kBoxResidualDim>& residuals,
                 const std::array<double, 2>& velocity);

}  // namespace peftdml
