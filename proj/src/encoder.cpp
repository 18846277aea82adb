#include "peftdml/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace peftdml {

void ModelConfig::validate() const {
    if (hidden < 1 || embed_dim < 1 || adapter_dim < 1 || detect_hidden < 1) {
        throw ConfigError("model: bad dimensions");
    }
    if (lora_rank < 1) throw ConfigError("model: lora rank must be >= 1");
    if (lora_alpha < 0.0) throw ConfigError("model: negative lora alpha");
}

Tensor EncoderStack::forward(const Tensor& x) const {
    Tensor h = a1.forward(relu(l1.forward(x)));
    return a2.forward(relu(l2.forward(h)));
}

Tensor EncoderStack::backbone_forward(const Tensor& x) const {
    return relu(l2.base.forward(relu(l1.base.forward(x))));
}

Tensor ProjectionHead::forward(const Tensor& latent) const {
    return normalize_rows(lin.forward(latent));
}

Tensor encode(const ModalityFeatures& features, int candidate, const EncoderStack& encoder) {
    if (!features.available) {
        throw AvailabilityError("encode: modality unavailable; mask it instead");
    }
    if (candidate < 0 || candidate >= features.candidates) {
        throw ContractError("encode: candidate index out of range");
    }
    if (features.dim != encoder.l1.base.in) throw ShapeError("encode: feature width mismatch");
    std::vector<double> row(features.row(candidate), features.row(candidate) + features.dim);
    return encoder.forward(Tensor::of({1, features.dim}, std::move(row)));
}

Tensor project(const Tensor& latent, const ProjectionHead& head) {
    return head.forward(latent);
}

namespace {

struct FrameRef {
    const SceneRecord* record;
    int frame;
};

// candidate rows of one modality with class targets (background = kNumClasses)
void gather_rows_for_modality(const std::vector<FrameRef>& frames, int first, int count,
                              Modality modality, std::vector<double>& flat,
                              std::vector<int>& targets) {
    const int dim = kModalityDims[static_cast<int>(modality)];
    flat.clear();
    targets.clear();
    for (int fi = first; fi < first + count; ++fi) {
        const SceneRecord& rec = *frames[fi].record;
        const int f = frames[fi].frame;
        const auto& feats = rec.features[f][static_cast<int>(modality)];
        if (!feats.available) continue;
        const auto& frame_objs = f == 0 ? rec.pair.frame_t : rec.pair.frame_t1;
        for (size_t c = 0; c < rec.candidates[f].size(); ++c) {
            if (!feats.candidate_valid[c]) continue;  // holdout exclusion
            int target = kNumClasses;
            const int inst = rec.candidates[f][c].assigned_instance;
            if (inst != kNoAssignment) {
                for (const auto& obj : frame_objs) {
                    if (obj.instance_id == inst) target = obj.class_id;
                }
            }
            flat.insert(flat.end(), feats.row(static_cast<int>(c)), feats.row(static_cast<int>(c)) + dim);
            targets.push_back(target);
        }
    }
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    return neg(mean(gather_cols(log_softmax_rows(logits), targets)));
}

}  // namespace

EncoderStack build_encoder_stack(ParameterSet& params, const ParameterSet& pretrained,
                                 Modality modality, const ModelConfig& config, uint64_t seed) {
    config.validate();
    const int in = kModalityDims[static_cast<int>(modality)];
    const std::string prefix = std::string("encoder.") + modality_name(modality);

    auto copy_layer = [&](const std::string& path, int din, int dout) {
        const Tensor& w = pretrained.at(path + ".W");
        const Tensor& b = pretrained.at(path + ".b");
        if (w.shape() != Shape{dout, din}) throw ShapeError("backbone shape mismatch at " + path);
        LinearLayer layer;
        layer.path = path;
        layer.in = din;
        layer.out = dout;
        layer.W = params.create(path + ".W", w.shape(), w.data());
        layer.b = params.create(path + ".b", b.shape(), b.data());
        return layer;
    };

    EncoderStack stack;
    stack.modality = modality;
    // narrow input layers cap the effective rank at min(in, out)
    const int r1 = std::min(config.lora_rank, std::min(in, config.hidden));
    const int r2 = std::min(config.lora_rank, config.hidden);
    const double a1 = config.lora_alpha > 0.0 ? config.lora_alpha : 2.0 * r1;
    const double a2 = config.lora_alpha > 0.0 ? config.lora_alpha : 2.0 * r2;
    stack.l1 = lora_wrap(params, copy_layer(prefix + ".l1", in, config.hidden), r1, a1,
                         stable_hash(seed, prefix + ".l1"));
    stack.l2 = lora_wrap(params, copy_layer(prefix + ".l2", config.hidden, config.hidden), r2, a2,
                         stable_hash(seed, prefix + ".l2"));
    stack.a1 = make_adapter(params, prefix + ".l1.adapter", config.hidden, config.adapter_dim,
                            stable_hash(seed, prefix + ".a1"));
    stack.a2 = make_adapter(params, prefix + ".l2.adapter", config.hidden, config.adapter_dim,
                            stable_hash(seed, prefix + ".a2"));
    return stack;
}

EncoderStack attach_encoder_stack(const ParameterSet& params, Modality modality,
                                  const ModelConfig& config) {
    const int in = kModalityDims[static_cast<int>(modality)];
    const std::string prefix = std::string("encoder.") + modality_name(modality);
    EncoderStack stack;
    stack.modality = modality;
    const int r1 = std::min(config.lora_rank, std::min(in, config.hidden));
    const int r2 = std::min(config.lora_rank, config.hidden);
    const double a1 = config.lora_alpha > 0.0 ? config.lora_alpha : 2.0 * r1;
    const double a2 = config.lora_alpha > 0.0 ? config.lora_alpha : 2.0 * r2;
    stack.l1 = attach_lora(params, attach_linear(params, prefix + ".l1", in, config.hidden), r1, a1);
    stack.l2 = attach_lora(params, attach_linear(params, prefix + ".l2", config.hidden, config.hidden),
                           r2, a2);
    stack.a1 = attach_adapter(params, prefix + ".l1.adapter", config.hidden, config.adapter_dim);
    stack.a2 = attach_adapter(params, prefix + ".l2.adapter", config.hidden, config.adapter_dim);
    return stack;
}

ProjectionHead build_projection(ParameterSet& params, Modality modality, const ModelConfig& config,
                                uint64_t seed) {
    ProjectionHead head;
    head.lin = make_linear(params, std::string("projection.") + modality_name(modality),
                           config.hidden, config.embed_dim, stable_hash(seed, "projection"));
    return head;
}

ProjectionHead attach_projection(const ParameterSet& params, Modality modality,
                                 const ModelConfig& config) {
    ProjectionHead head;
    head.lin = attach_linear(params, std::string("projection.") + modality_name(modality),
                             config.hidden, config.embed_dim);
    return head;
}

PretrainResult pretrain_backbones(const DatasetManifest& train, const DatasetManifest* val,
                                  const PretrainConfig& config, uint64_t seed, int hidden) {
    if (train.records.empty()) throw ContractError("pretrain: empty train manifest");
    if (config.epochs < 1 || config.batch_frames < 1 || config.lr <= 0) {
        throw ConfigError("pretrain: bad configuration");
    }

    std::vector<FrameRef> frames;
    frames.reserve(train.records.size() * 2);
    for (const auto& rec : train.records) {
        frames.push_back({&rec, 0});
        frames.push_back({&rec, 1});
    }

    PretrainResult result;
    result.probe_accuracy.fill(-1.0);

    for (int m = 0; m < kNumModalities; ++m) {
        const Modality modality = static_cast<Modality>(m);
        const int in = kModalityDims[m];
        const std::string prefix = std::string("encoder.") + modality_name(modality);
        const uint64_t mod_seed = stable_hash(seed, prefix);

        ParameterSet ps;
        LinearLayer l1 = make_linear(ps, prefix + ".l1", in, hidden, mod_seed);
        LinearLayer l2 = make_linear(ps, prefix + ".l2", hidden, hidden, mod_seed);
        LinearLayer probe = make_linear(ps, "probe", hidden, kNumClasses + 1, mod_seed);

        OptimizerState opt;
        opt.config.lr = config.lr;
        std::vector<int> order(frames.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

        std::vector<double> flat;
        std::vector<int> targets;
        std::vector<FrameRef> shuffled(frames.size());
        for (int epoch = 0; epoch < config.epochs; ++epoch) {
            Rng shuffle_rng(stable_hash(mod_seed, 1000 + epoch));
            for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
                std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
            }
            for (size_t i = 0; i < order.size(); ++i) shuffled[i] = frames[order[i]];
            for (int first = 0; first < static_cast<int>(shuffled.size()); first += config.batch_frames) {
                const int count = std::min(config.batch_frames,
                                           static_cast<int>(shuffled.size()) - first);
                gather_rows_for_modality(shuffled, first, count, modality, flat, targets);
                if (targets.empty()) continue;
                ps.clear_grads();
                Tensor x = Tensor::of({static_cast<int>(targets.size()), in}, flat);
                Tensor h = relu(l2.forward(relu(l1.forward(x))));
                backward(cross_entropy_rows(probe.forward(h), targets));
                optimizer_step(ps, collect_grads(ps), opt);
            }
        }

        if (val != nullptr && !val->records.empty()) {
            std::vector<FrameRef> val_frames;
            for (const auto& rec : val->records) {
                val_frames.push_back({&rec, 0});
                val_frames.push_back({&rec, 1});
            }
            gather_rows_for_modality(val_frames, 0, static_cast<int>(val_frames.size()), modality,
                                     flat, targets);
            if (!targets.empty()) {
                Tensor x = Tensor::of({static_cast<int>(targets.size()), in}, flat);
                Tensor logits = probe.forward(relu(l2.forward(relu(l1.forward(x)))));
                int correct = 0;
                const int k = kNumClasses + 1;
                for (size_t r = 0; r < targets.size(); ++r) {
                    const double* row = logits.data().data() + r * k;
                    int best = 0;
                    for (int j = 1; j < k; ++j) {
                        if (row[j] > row[best]) best = j;
                    }
                    correct += best == targets[r];
                }
                result.probe_accuracy[m] = static_cast<double>(correct) / targets.size();
            }
        }

        // probe discarded; backbone weights copied out and frozen
        result.params.create(prefix + ".l1.W", l1.W.shape(), l1.W.data());
        result.params.create(prefix + ".l1.b", l1.b.shape(), l1.b.data());
        result.params.create(prefix + ".l2.W", l2.W.shape(), l2.W.data());
        result.params.create(prefix + ".l2.b", l2.b.shape(), l2.b.data());
        result.params.freeze_prefix(prefix);
    }
    return result;
}

}  // namespace peftdml
