#include "peftdml/param.hpp"

#include <algorithm>
#include <cmath>

#include "peftdml/rng.hpp"

namespace peftdml {

Tensor& ParameterSet::create(const std::string& path, const Shape& shape, std::vector<double> values) {
    if (params_.count(path)) throw ContractError("ParameterSet: duplicate path " + path);
    auto [it, ok] = params_.emplace(path, Tensor::of(shape, std::move(values), true));
    (void)ok;
    return it->second;
}

Tensor& ParameterSet::at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw ContractError("ParameterSet: unknown path " + path);
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw ContractError("ParameterSet: unknown path " + path);
    return it->second;
}

void ParameterSet::freeze(const std::string& path) {
    at(path).set_requires_grad(false);
    frozen_.insert(path);
}

void ParameterSet::freeze_prefix(const std::string& prefix) {
    for (auto& [path, t] : params_) {
        if (path.rfind(prefix, 0) == 0) {
            t.set_requires_grad(false);
            frozen_.insert(path);
        }
    }
}

std::vector<std::string> ParameterSet::trainable_paths() const {
    std::vector<std::string> out;
    for (const auto& [path, t] : params_) {
        if (!is_frozen(path)) out.push_back(path);
    }
    return out;
}

int64_t ParameterSet::total_scalars() const {
    int64_t n = 0;
    for (const auto& [path, t] : params_) n += t.numel();
    return n;
}

void ParameterSet::clear_grads() {
    for (auto& [path, t] : params_) t.node->grad.clear();
}

GradMap collect_grads(const ParameterSet& params) {
    GradMap grads;
    for (const auto& [path, t] : params.all()) {
        if (params.is_frozen(path)) continue;
        if (!t.has_grad()) {
            throw ContractError("collect_grads: trainable parameter " + path + " has no gradient");
        }
        grads.emplace(path, t.grad());
    }
    return grads;
}

void optimizer_step(ParameterSet& params, const GradMap& grads, OptimizerState& state) {
    const AdamConfig& c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (const auto& kv : params.all()) {
        const std::string& path = kv.first;
        if (params.is_frozen(path)) continue;
        Tensor& t = params.at(path);
        auto git = grads.find(path);
        if (git == grads.end()) {
            throw ContractError("optimizer_step: missing gradient for trainable parameter " + path);
        }
        const std::vector<double>& g = git->second;
        if (g.size() != t.data().size()) {
            throw ShapeError("optimizer_step: gradient shape differs for " + path);
        }
        auto& m = state.m[path];
        auto& v = state.v[path];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        auto& x = t.data();
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

GradCheckReport grad_check(const std::function<Tensor()>& objective_builder, ParameterSet& params,
                           double eps, double tol, int coords_per_param, uint64_t sample_seed) {
    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;

    Tensor objective = objective_builder();
    backward(objective);
    GradMap analytic;
    for (const auto& [path, t] : params.all()) {
        if (params.is_frozen(path)) continue;
        if (!t.has_grad()) {
            throw ContractError("grad_check: parameter " + path + " does not reach the objective");
        }
        analytic.emplace(path, t.grad());
    }

    for (const auto& [path, ga] : analytic) {
        Tensor& t = params.at(path);
        const int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (coords_per_param <= 0 || coords_per_param >= n) {
            coords.resize(n);
            for (int64_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            // deterministic sample without replacement
            Rng rng(stable_hash(sample_seed, path));
            std::vector<int64_t> all(n);
            for (int64_t i = 0; i < n; ++i) all[i] = i;
            for (int i = 0; i < coords_per_param; ++i) {
                int j = i + rng.uniform_int(static_cast<int>(n - i));
                std::swap(all[i], all[j]);
                coords.push_back(all[i]);
            }
            std::sort(coords.begin(), coords.end());
        }

        GradCheckReport::Entry entry;
        entry.path = path;
        entry.checked_coords = static_cast<int>(coords.size());
        auto& x = t.data();
        for (int64_t i : coords) {
            const double orig = x[i];
            x[i] = orig + eps;
            const double fp = objective_builder().item();
            x[i] = orig - eps;
            const double fm = objective_builder().item();
            x[i] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = ga[i];
            const double rel = std::fabs(a - fd) / std::max({1.0, std::fabs(a), std::fabs(fd)});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace peftdml
