#pragma once

#include <array>

#include "peftdml/peft.hpp"
#include "peftdml/world.hpp"

namespace peftdml {

// Default sizes keep the frozen backbone above 90% of all parameters at
// every supported LoRA rank while staying trainable in minutes on a CPU.
struct ModelConfig {
    int hidden = 672;
    int embed_dim = 16;
    int lora_rank = 8;
    double lora_alpha = 0.0;  // 0 selects the alpha = 2r convention
    int adapter_dim = 2;
    int detect_hidden = 32;

    double resolved_alpha() const { return lora_alpha > 0.0 ? lora_alpha : 2.0 * lora_rank; }
    void validate() const;
};

// Per-modality frozen 2-layer MLP with LoRA on both layers and a serial
// residual adapter after each activation.
struct EncoderStack {
    Modality modality = Modality::Lidar;
    LoRALinear l1;
    LoRALinear l2;
    AdapterBlock a1;
    AdapterBlock a2;

    Tensor forward(const Tensor& x) const;           // [n x in] -> [n x hidden]
    Tensor backbone_forward(const Tensor& x) const;  // frozen weights only, PEFT bypassed
};

struct ProjectionHead {
    LinearLayer lin;  // hidden -> embed_dim, fully trainable
    Tensor forward(const Tensor& latent) const;  // rows normalized to unit length
};

// Single-candidate encode; callers must mask unavailable modalities
// instead of calling through them.
Tensor encode(const ModalityFeatures& features, int candidate, const EncoderStack& encoder);
Tensor project(const Tensor& latent, const ProjectionHead& head);

struct PretrainConfig {
    int epochs = 3;
    double lr = 1e-3;
    int batch_frames = 16;
};

struct PretrainResult {
    ParameterSet params;  // frozen "encoder.<modality>.l{1,2}.{W,b}"
    std::array<double, kNumModalities> probe_accuracy{};  // measured on val; -1 if skipped
};

// Trains each backbone separately on single-modality candidate
// classification (classes + background) with a linear probe that is
// discarded afterwards; all backbone paths come back frozen.
PretrainResult pretrain_backbones(const DatasetManifest& train, const DatasetManifest* val,
                                  const PretrainConfig& config, uint64_t seed, int hidden = 64);

// Copies one modality's frozen backbone out of `pretrained` into `params`
// and wraps it with freshly initialized LoRA + adapter layers.
EncoderStack build_encoder_stack(ParameterSet& params, const ParameterSet& pretrained,
                                 Modality modality, const ModelConfig& config, uint64_t seed);
// Attaches to parameters already present (checkpoint load).
EncoderStack attach_encoder_stack(const ParameterSet& params, Modality modality,
                                  const ModelConfig& config);

ProjectionHead build_projection(ParameterSet& params, Modality modality, const ModelConfig& config,
                                uint64_t seed);
ProjectionHead attach_projection(const ParameterSet& params, Modality modality,
                                 const ModelConfig& config);

}  // namespace peftdml
