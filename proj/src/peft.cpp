#include "peftdml/peft.hpp"

#include <algorithm>
#include <cmath>

namespace peftdml {

Tensor LinearLayer::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != in) throw ShapeError("linear: input width mismatch at " + path);
    return add_row_bias(matmul_nt(x, W), b);
}

LinearLayer make_linear(ParameterSet& params, const std::string& path, int in, int out,
                        uint64_t init_seed, double w_std) {
    if (in <= 0 || out <= 0) throw ConfigError("linear: dimensions must be positive");
    const double std = w_std > 0.0 ? w_std : 1.0 / std::sqrt(static_cast<double>(in));
    Rng rng(stable_hash(init_seed, path));
    std::vector<double> w(static_cast<size_t>(out) * in);
    for (auto& v : w) v = rng.normal(0.0, std);
    LinearLayer layer;
    layer.path = path;
    layer.in = in;
    layer.out = out;
    layer.W = params.create(path + ".W", {out, in}, std::move(w));
    layer.b = params.create(path + ".b", {out}, std::vector<double>(out, 0.0));
    return layer;
}

LinearLayer attach_linear(const ParameterSet& params, const std::string& path, int in, int out) {
    LinearLayer layer;
    layer.path = path;
    layer.in = in;
    layer.out = out;
    layer.W = params.at(path + ".W");
    layer.b = params.at(path + ".b");
    if (layer.W.shape() != Shape{out, in} || layer.b.shape() != Shape{out}) {
        throw ShapeError("linear: checkpoint shape mismatch at " + path);
    }
    return layer;
}

Tensor LoRALinear::forward(const Tensor& x) const {
    Tensor main = base.forward(x);
    Tensor update = matmul_nt(matmul_nt(x, A), B);
    return add(main, mul_scalar(update, alpha / rank));
}

LoRALinear lora_wrap(ParameterSet& params, LinearLayer base, int rank, double alpha,
                     uint64_t init_seed) {
    if (rank < 1 || rank > std::min(base.in, base.out)) {
        throw ConfigError("lora_wrap: rank out of range at " + base.path);
    }
    if (alpha <= 0.0) throw ConfigError("lora_wrap: alpha must be positive");
    LoRALinear l;
    l.rank = rank;
    l.alpha = alpha;
    Rng rng(stable_hash(init_seed, base.path + ".lora"));
    std::vector<double> a(static_cast<size_t>(rank) * base.in);
    for (auto& v : a) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(rank)));
    l.A = params.create(base.path + ".lora.A", {rank, base.in}, std::move(a));
    l.B = params.create(base.path + ".lora.B", {base.out, rank},
                        std::vector<double>(static_cast<size_t>(base.out) * rank, 0.0));
    params.freeze(base.path + ".W");
    params.freeze(base.path + ".b");
    l.base = std::move(base);
    return l;
}

LoRALinear attach_lora(const ParameterSet& params, LinearLayer base, int rank, double alpha) {
    LoRALinear l;
    l.rank = rank;
    l.alpha = alpha;
    l.A = params.at(base.path + ".lora.A");
    l.B = params.at(base.path + ".lora.B");
    if (l.A.shape() != Shape{rank, base.in} || l.B.shape() != Shape{base.out, rank}) {
        throw ShapeError("lora: checkpoint shape mismatch at " + base.path);
    }
    l.base = std::move(base);
    return l;
}

LinearLayer merge_lora(const LoRALinear& layer) {
    const int in = layer.base.in, out = layer.base.out, r = layer.rank;
    std::vector<double> merged = layer.base.W.data();
    const double scale = layer.alpha / r;
    const auto& a = layer.A.data();
    const auto& b = layer.B.data();
    for (int i = 0; i < out; ++i) {
        for (int p = 0; p < r; ++p) {
            const double bip = b[static_cast<size_t>(i) * r + p] * scale;
            if (bip == 0.0) continue;
            for (int j = 0; j < in; ++j) {
                merged[static_cast<size_t>(i) * in + j] += bip * a[static_cast<size_t>(p) * in + j];
            }
        }
    }
    LinearLayer out_layer;
    out_layer.path = layer.base.path + ".merged";
    out_layer.in = in;
    out_layer.out = out;
    out_layer.W = Tensor::of({out, in}, std::move(merged));
    out_layer.b = Tensor::of({out}, layer.base.b.data());
    return out_layer;
}

Tensor AdapterBlock::forward(const Tensor& x) const {
    return add(x, matmul_nt(relu(matmul_nt(x, down_w)), up_w));
}

AdapterBlock make_adapter(ParameterSet& params, const std::string& path, int dim, int bottleneck,
                          uint64_t init_seed) {
    if (bottleneck < 1) throw ConfigError("adapter: bottleneck must be positive");
    Rng rng(stable_hash(init_seed, path));
    std::vector<double> down(static_cast<size_t>(bottleneck) * dim);
    for (auto& v : down) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    AdapterBlock block;
    block.down_w = params.create(path + ".down.W", {bottleneck, dim}, std::move(down));
    // identity at initialization
    block.up_w = params.create(path + ".up.W", {dim, bottleneck},
                               std::vector<double>(static_cast<size_t>(dim) * bottleneck, 0.0));
    return block;
}

AdapterBlock attach_adapter(const ParameterSet& params, const std::string& path, int dim, int bottleneck) {
    AdapterBlock block;
    block.down_w = params.at(path + ".down.W");
    block.up_w = params.at(path + ".up.W");
    if (block.down_w.shape() != Shape{bottleneck, dim} || block.up_w.shape() != Shape{dim, bottleneck}) {
        throw ShapeError("adapter: checkpoint shape mismatch at " + path);
    }
    return block;
}

std::string parameter_group(const std::string& path) {
    if (path.find(".lora.") != std::string::npos) return "lora";
    if (path.find(".adapter") != std::string::npos) return "adapter";
    if (path.rfind("projection.", 0) == 0) return "projection";
    if (path.rfind("fusion.", 0) == 0) return "fusion";
    if (path.rfind("detect.", 0) == 0) return "detection";
    return "backbone";
}

TrainabilityReport trainability_report(const ParameterSet& params) {
    TrainabilityReport report;
    for (const auto& [path, t] : params.all()) {
        const int64_t n = t.numel();
        const bool trainable = !params.is_frozen(path);
        report.total += n;
        if (trainable) report.trainable += n;
        auto& g = report.groups[parameter_group(path)];
        g.first += n;
        if (trainable) g.second += n;
    }
    report.fraction = report.total > 0 ? static_cast<double>(report.trainable) / report.total : 0.0;
    return report;
}

}  // namespace peftdml
