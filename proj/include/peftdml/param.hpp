#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "peftdml/tensor.hpp"

namespace peftdml {

// Named parameter store. Paths are dotted, e.g. "encoder.lidar.l1.W".
// Frozen paths are excluded from optimizer updates and gradient checks.
class ParameterSet {
public:
    Tensor& create(const std::string& path, const Shape& shape, std::vector<double> values);
    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;
    bool has(const std::string& path) const { return params_.count(path) > 0; }

    void freeze(const std::string& path);
    void freeze_prefix(const std::string& prefix);
    bool is_frozen(const std::string& path) const { return frozen_.count(path) > 0; }

    const std::map<std::string, Tensor>& all() const { return params_; }
    const std::set<std::string>& frozen() const { return frozen_; }
    std::vector<std::string> trainable_paths() const;
    int64_t total_scalars() const;

    void clear_grads();

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> frozen_;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Collects grads of all trainable parameters from the last backward pass.
// ContractError if a trainable parameter has no gradient.
GradMap collect_grads(const ParameterSet& params);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    AdamConfig config;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    int64_t step = 0;
};

// Adam with bias correction, applied to non-frozen parameters only.
// Grads must cover every trainable parameter.
void optimizer_step(ParameterSet& params, const GradMap& grads, OptimizerState& state);

struct GradCheckReport {
    struct Entry {
        std::string path;
        double max_rel_err = 0.0;
        int checked_coords = 0;
    };
    std::vector<Entry> entries;
    double eps = 0.0;
    double tol = 0.0;
    bool pass = false;
    double max_rel_err = 0.0;
};

// Central finite differences (f(x+eps) - f(x-eps)) / 2eps against the
// analytic gradient, per scalar coordinate of every trainable parameter.
// coords_per_param > 0 checks a deterministic sample of that many
// coordinates per parameter instead of all of them.
GradCheckReport grad_check(const std::function<Tensor()>& objective_builder, ParameterSet& params,
                           double eps, double tol, int coords_per_param = 0,
                           uint64_t sample_seed = 17);

}  // namespace peftdml
