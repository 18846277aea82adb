#pragma once

#include <map>
#include <string>

#include "peftdml/param.hpp"
#include "peftdml/rng.hpp"
#include "peftdml/tensor.hpp"

namespace peftdml {

// Dense layer y = x W^T + b over row batches x [n x in].
struct LinearLayer {
    std::string path;  // parameter path prefix; "<path>.W" and "<path>.b"
    Tensor W;          // [out x in]
    Tensor b;          // [out]
    int in = 0;
    int out = 0;

    Tensor forward(const Tensor& x) const;
};

// Registers fresh weights under "<path>.W"/"<path>.b". w_std == 0 selects
// 1/sqrt(in) scaling.
LinearLayer make_linear(ParameterSet& params, const std::string& path, int in, int out,
                        uint64_t init_seed, double w_std = 0.0);
// Attaches to already-registered weights (checkpoint load path).
LinearLayer attach_linear(const ParameterSet& params, const std::string& path, int in, int out);

// Frozen base plus trainable low-rank update scaled by alpha/rank:
// forward(x) = base(x) + (alpha/r) * (x A^T) B^T.
struct LoRALinear {
    LinearLayer base;
    Tensor A;  // [r x in], Gaussian init
    Tensor B;  // [out x r], zero init
    int rank = 0;
    double alpha = 0.0;

    Tensor forward(const Tensor& x) const;
};

// Freezes the base layer's paths and registers "<base>.lora.A"/".lora.B".
LoRALinear lora_wrap(ParameterSet& params, LinearLayer base, int rank, double alpha,
                     uint64_t init_seed);
LoRALinear attach_lora(const ParameterSet& params, LinearLayer base, int rank, double alpha);

// Plain layer with W' = W + (alpha/r) B A; detached from any ParameterSet.
LinearLayer merge_lora(const LoRALinear& layer);

// Residual bottleneck x + up(relu(down(x))) without biases; up is
// zero-initialized so the block is the identity at construction.
struct AdapterBlock {
    Tensor down_w;  // [bottleneck x in]
    Tensor up_w;    // [in x bottleneck]

    Tensor forward(const Tensor& x) const;
};

AdapterBlock make_adapter(ParameterSet& params, const std::string& path, int dim, int bottleneck,
                          uint64_t init_seed);
AdapterBlock attach_adapter(const ParameterSet& params, const std::string& path, int dim, int bottleneck);

struct TrainabilityReport {
    int64_t total = 0;
    int64_t trainable = 0;
    double fraction = 0.0;
    // group -> (total scalars, trainable scalars)
    std::map<std::string, std::pair<int64_t, int64_t>> groups;
};

// Exact counts by exhaustive enumeration of the parameter set. Groups:
// backbone, lora, adapter, projection, fusion, detection.
TrainabilityReport trainability_report(const ParameterSet& params);
std::string parameter_group(const std::string& path);

}  // namespace peftdml
