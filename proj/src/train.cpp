#include "peftdml/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "peftdml/checkpoint.hpp"

namespace peftdml {

void TrainConfig::validate() const {
    if (epochs < 1 || batch_pairs < 1) throw ConfigError("train: counts must be positive");
    if (lr <= 0) throw ConfigError("train: learning rate must be positive");
    for (double p : dropout_prob) {
        if (p < 0 || p >= 1) throw ConfigError("train: dropout probability out of [0,1)");
    }
    model_config().validate();
    loss.validate();
}

ModelConfig TrainConfig::model_config() const {
    ModelConfig m;
    m.hidden = hidden;
    m.embed_dim = embed_dim;
    m.lora_rank = lora_rank;
    m.lora_alpha = lora_alpha;
    m.adapter_dim = adapter_dim;
    m.detect_hidden = detect_hidden;
    return m;
}

namespace {

struct InstanceInfo {
    int class_id = 0;
    Box3D box;
};

InstanceInfo instance_info(const SceneRecord& rec, int frame, int instance_id) {
    for (const auto& obj : (frame == 0 ? rec.pair.frame_t : rec.pair.frame_t1)) {
        if (obj.instance_id == instance_id) return {obj.class_id, obj.box};
    }
    throw ContractError("train: candidate references unknown instance");
}


// per-batch loss inputs derived from the forward pass
struct LossInputs {
    DetTargets det;
    Tensor metric_emb;  // [m x d] foreground per-modality embeddings
    std::vector<EmbeddingMeta> metas;
    std::vector<int> mining_rows;  // object-level entries eligible for triplet mining
    std::vector<std::pair<int, int>> modal_pairs;   // indices into metric_emb
    std::vector<std::pair<int, int>> fused_pairs;   // positions into fb.fused
    std::vector<std::pair<int, int>> cross_pairs;   // indices into metric_emb
};

// items are expected in (frame t, frame t+1) order per scene pair; pair_of
// maps the item index to its scene-pair slot
LossInputs build_loss_inputs(const std::vector<FrameItem>& items, const ForwardBatch& fb,
                             bool cross_modal_pairs) {
    LossInputs in;

    // detection targets over the observed (fused) rows
    for (size_t o = 0; o < fb.observed_rows.size(); ++o) {
        const int r = fb.observed_rows[o];
        const FrameItem& item = items[fb.item_of_row[r]];
        const CandidateAnchor& cand = item.record->candidates[item.frame][fb.cand_of_row[r]];
        if (cand.assigned_instance == kNoAssignment) {
            in.det.class_targets.push_back(kNumClasses);
        } else {
            InstanceInfo info = instance_info(*item.record, item.frame, cand.assigned_instance);
            in.det.class_targets.push_back(info.class_id);
            in.det.assigned_rows.push_back(static_cast<int>(o));
            in.det.anchors.push_back(cand.box);
            in.det.gt_boxes.push_back(info.box);
        }
    }

    // foreground per-modality embeddings for the metric/consistency terms
    struct Key {
        int pair_id, instance, modality;
        bool operator<(const Key& k) const {
            return std::tie(pair_id, instance, modality) < std::tie(k.pair_id, k.instance, k.modality);
        }
    };
    std::map<Key, std::array<int, 2>> by_key;  // -> metric_emb index per frame (-1 missing)
    std::array<std::vector<int>, kNumModalities> rows_of;
    std::vector<std::array<int, 3>> entry_meta;  // (pair_id, frame, instance) per metric_emb row

    int emb_index = 0;
    for (int m = 0; m < kNumModalities; ++m) {
        for (int r = 0; r < fb.total_rows; ++r) {
            if (!fb.row_mask[r * kNumModalities + m]) continue;
            const FrameItem& item = items[fb.item_of_row[r]];
            const CandidateAnchor& cand = item.record->candidates[item.frame][fb.cand_of_row[r]];
            if (cand.assigned_instance == kNoAssignment) continue;
            InstanceInfo info = instance_info(*item.record, item.frame, cand.assigned_instance);
            rows_of[m].push_back(r);
            in.metas.push_back({info.class_id, m});
            // class triplets through ego-level modalities would collapse the space
            if (modality_is_object_level(static_cast<Modality>(m))) in.mining_rows.push_back(emb_index);
            const int pair_id = fb.item_of_row[r] / 2;
            Key key{pair_id, cand.assigned_instance, m};
            auto it = by_key.try_emplace(key, std::array<int, 2>{-1, -1}).first;
            it->second[item.frame] = emb_index;
            entry_meta.push_back({pair_id, item.frame, cand.assigned_instance});
            ++emb_index;
        }
    }
    if (emb_index > 0) {
        std::vector<Tensor> parts;
        for (int m = 0; m < kNumModalities; ++m) {
            if (!rows_of[m].empty()) parts.push_back(gather_rows(fb.embeddings[m], rows_of[m]));
        }
        in.metric_emb = parts.size() == 1 ? parts[0] : concat_rows(parts);
    }
    for (const auto& [key, idx] : by_key) {
        if (idx[0] >= 0 && idx[1] >= 0) in.modal_pairs.push_back({idx[0], idx[1]});
    }

    // temporal pairs of fused embeddings, matched by instance id
    std::map<std::pair<int, int>, std::array<int, 2>> fused_by_key;
    for (size_t o = 0; o < fb.observed_rows.size(); ++o) {
        const int r = fb.observed_rows[o];
        const FrameItem& item = items[fb.item_of_row[r]];
        const CandidateAnchor& cand = item.record->candidates[item.frame][fb.cand_of_row[r]];
        if (cand.assigned_instance == kNoAssignment) continue;
        const int pair_id = fb.item_of_row[r] / 2;
        auto it = fused_by_key
                      .try_emplace(std::make_pair(pair_id, cand.assigned_instance),
                                   std::array<int, 2>{-1, -1})
                      .first;
        it->second[item.frame] = static_cast<int>(o);
    }
    for (const auto& [key, idx] : fused_by_key) {
        if (idx[0] >= 0 && idx[1] >= 0) in.fused_pairs.push_back({idx[0], idx[1]});
    }

    if (cross_modal_pairs) {
        // same instance, same frame, different object-level modalities
        std::map<std::array<int, 3>, std::vector<int>> group;
        for (int e = 0; e < emb_index; ++e) {
            if (modality_is_object_level(static_cast<Modality>(in.metas[e].modality))) {
                group[entry_meta[e]].push_back(e);
            }
        }
        for (const auto& [key, members] : group) {
            for (size_t a = 0; a < members.size(); ++a) {
                for (size_t b = a + 1; b < members.size(); ++b) {
                    in.cross_pairs.push_back({members[a], members[b]});
                }
            }
        }
    }
    return in;
}

Tensor pair_sq_sum(const Tensor& source, const std::vector<std::pair<int, int>>& pairs) {
    std::vector<int> a, b;
    a.reserve(pairs.size());
    b.reserve(pairs.size());
    for (const auto& [x, y] : pairs) {
        a.push_back(x);
        b.push_back(y);
    }
    return sum(square(sub(gather_rows(source, a), gather_rows(source, b))));
}

struct StepLoss {
    Tensor total;
    LossBreakdown breakdown;
};

StepLoss batch_loss(const std::vector<FrameItem>& items, const ForwardBatch& fb,
                    const LossConfig& loss_cfg) {
    LossInputs in = build_loss_inputs(items, fb, loss_cfg.cross_modal_consistency);
    DetLossTerms det = det_loss(fb.det, in.det, loss_cfg.gamma);

    Tensor metric = Tensor::scalar(0.0);
    if (in.metric_emb.defined() && !in.mining_rows.empty()) {
        const int d = in.metric_emb.cols();
        // mine over the object-level subview, then map indices back
        std::vector<double> view;
        std::vector<EmbeddingMeta> view_metas;
        view.reserve(in.mining_rows.size() * d);
        for (int e : in.mining_rows) {
            const double* row = in.metric_emb.data().data() + static_cast<int64_t>(e) * d;
            view.insert(view.end(), row, row + d);
            view_metas.push_back(in.metas[e]);
        }
        std::vector<Triplet> triplets =
            mine_triplets(view, d, view_metas, MiningStrategy::BatchHardCrossModal);
        if (!triplets.empty()) {
            std::vector<int> ai, pi, ni;
            for (const auto& t : triplets) {
                ai.push_back(in.mining_rows[t.anchor]);
                pi.push_back(in.mining_rows[t.positive]);
                ni.push_back(in.mining_rows[t.negative]);
            }
            metric = mean(triplet_loss_rows(gather_rows(in.metric_emb, ai),
                                            gather_rows(in.metric_emb, pi),
                                            gather_rows(in.metric_emb, ni), loss_cfg.margin));
        }
    }

    Tensor consistency = Tensor::scalar(0.0);
    const size_t pair_count =
        in.modal_pairs.size() + in.fused_pairs.size() + in.cross_pairs.size();
    if (pair_count > 0) {
        Tensor acc;
        if (!in.modal_pairs.empty()) acc = pair_sq_sum(in.metric_emb, in.modal_pairs);
        if (!in.fused_pairs.empty()) {
            Tensor f = pair_sq_sum(fb.fused, in.fused_pairs);
            acc = acc.defined() ? add(acc, f) : f;
        }
        if (!in.cross_pairs.empty()) {
            Tensor c = pair_sq_sum(in.metric_emb, in.cross_pairs);
            acc = acc.defined() ? add(acc, c) : c;
        }
        consistency = mul_scalar(acc, 1.0 / static_cast<double>(pair_count));
    }

    TotalLoss total = total_loss(det, metric, consistency, loss_cfg);
    return {total.total, total.breakdown};
}

std::array<uint8_t, kNumModalities> stored_availability_impl(const SceneRecord& rec, int frame) {
    std::array<uint8_t, kNumModalities> out{};
    for (int m = 0; m < kNumModalities; ++m) out[m] = rec.features[frame][m].available ? 1 : 0;
    return out;
}

}  // namespace

BatchObjective training_objective(const Model& model, const std::vector<FrameItem>& items,
                                  const LossConfig& config) {
    ForwardBatch fb = forward_frames(model, items);
    StepLoss loss = batch_loss(items, fb, config);
    return {loss.total, loss.breakdown};
}

Checkpoint train(const TrainConfig& config, const DatasetManifest& train_split,
                 const ParameterSet& pretrained, uint64_t seed, int max_steps) {
    config.validate();
    if (train_split.records.empty()) throw ContractError("train: empty manifest");
    if (pretrained.all().empty()) throw ContractError("train: pretrained backbones required");

    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.seed = seed;
    ckpt.dataset_hash = train_split.config_hash;

    Model model = init_model(ckpt.params, pretrained, config.model_config(), seed);
    OptimizerState opt;
    opt.config.lr = config.lr;

    const int n_records = static_cast<int>(train_split.records.size());
    std::vector<int> order(n_records);
    for (int i = 0; i < n_records; ++i) order[i] = i;

    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(stable_hash(seed, 5000 + epoch));
        for (int i = n_records - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

        for (int first = 0; first < n_records; first += config.batch_pairs) {
            if (max_steps > 0 && step >= max_steps) return ckpt;
            const int count = std::min(config.batch_pairs, n_records - first);

            std::vector<FrameItem> items;
            items.reserve(2 * count);
            for (int k = 0; k < count; ++k) {
                const SceneRecord& rec = train_split.records[order[first + k]];
                const auto avail_t = stored_availability_impl(rec, 0);
                const auto avail_t1 = stored_availability_impl(rec, 1);
                std::array<uint8_t, kNumModalities> eff_t{}, eff_t1{};
                // resample until both frames keep at least one modality
                for (uint64_t attempt = 0;; ++attempt) {
                    AvailabilityMask mask = sample_dropout_mask(
                        stable_hash(seed, 90000 + static_cast<uint64_t>(step) * 4096 +
                                              static_cast<uint64_t>(k) * 64 + attempt),
                        config.dropout_prob);
                    bool any_t = false, any_t1 = false;
                    for (int m = 0; m < kNumModalities; ++m) {
                        eff_t[m] = mask.available[m] & avail_t[m];
                        eff_t1[m] = mask.available[m] & avail_t1[m];
                        any_t |= eff_t[m] != 0;
                        any_t1 |= eff_t1[m] != 0;
                    }
                    if (any_t && any_t1) break;
                }
                items.push_back({&rec, 0, eff_t});
                items.push_back({&rec, 1, eff_t1});
            }

            ckpt.params.clear_grads();
            ForwardBatch fb = forward_frames(model, items);
            StepLoss loss = batch_loss(items, fb, config.loss);
            if (!std::isfinite(loss.breakdown.total)) {
                std::ostringstream msg;
                msg << "train: non-finite loss at step " << step << " (det_cls "
                    << loss.breakdown.det_cls << ", det_iou " << loss.breakdown.det_iou
                    << ", det_orient " << loss.breakdown.det_orient << ", metric "
                    << loss.breakdown.metric << ", consistency " << loss.breakdown.consistency << ")";
                throw Error(msg.str());
            }
            backward(loss.total);
            optimizer_step(ckpt.params, collect_grads(ckpt.params), opt);
            ckpt.curve.push_back({step, loss.breakdown});
            ++step;
        }
    }
    return ckpt;
}

// ---- checkpoint serialization ----

namespace {

nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {
        {"epochs", c.epochs},
        {"batch_pairs", c.batch_pairs},
        {"lr", c.lr},
        {"lora_rank", c.lora_rank},
        {"lora_alpha", c.lora_alpha},
        {"adapter_dim", c.adapter_dim},
        {"detect_hidden", c.detect_hidden},
        {"hidden", c.hidden},
        {"embed_dim", c.embed_dim},
        {"dropout_prob", c.dropout_prob},
        {"loss",
         {{"lambda_det", c.loss.lambda_det},
          {"lambda_met", c.loss.lambda_met},
          {"lambda_cons", c.loss.lambda_cons},
          {"margin", c.loss.margin},
          {"gamma", c.loss.gamma},
          {"cross_modal_consistency", c.loss.cross_modal_consistency}}},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs");
    c.batch_pairs = j.at("batch_pairs");
    c.lr = j.at("lr");
    c.lora_rank = j.at("lora_rank");
    c.lora_alpha = j.at("lora_alpha");
    c.adapter_dim = j.at("adapter_dim");
    c.detect_hidden = j.at("detect_hidden");
    c.hidden = j.at("hidden");
    c.embed_dim = j.at("embed_dim");
    c.dropout_prob = j.at("dropout_prob");
    const auto& l = j.at("loss");
    c.loss.lambda_det = l.at("lambda_det");
    c.loss.lambda_met = l.at("lambda_met");
    c.loss.lambda_cons = l.at("lambda_cons");
    c.loss.margin = l.at("margin");
    c.loss.gamma = l.at("gamma");
    c.loss.cross_modal_consistency = l.at("cross_modal_consistency");
    return c;
}

}  // namespace

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json j;
    j["version"] = 1;
    j["seed"] = ckpt.seed;
    j["dataset_hash"] = ckpt.dataset_hash;
    j["train_config"] = train_config_to_json(ckpt.config);
    j["param_set"] = param_set_to_json(ckpt.params);
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : ckpt.curve) {
        curve.push_back({p.step, p.loss.det_cls, p.loss.det_iou, p.loss.det_orient, p.loss.metric,
                         p.loss.consistency, p.loss.total});
    }
    j["curve"] = std::move(curve);
    return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != 1) throw IoError("checkpoint: unsupported version");
    Checkpoint ckpt;
    ckpt.seed = j.at("seed");
    ckpt.dataset_hash = j.at("dataset_hash");
    ckpt.config = train_config_from_json(j.at("train_config"));
    ckpt.params = param_set_from_json(j.at("param_set"));
    for (const auto& row : j.at("curve")) {
        CurvePoint p;
        p.step = row.at(0);
        p.loss.det_cls = row.at(1);
        p.loss.det_iou = row.at(2);
        p.loss.det_orient = row.at(3);
        p.loss.metric = row.at(4);
        p.loss.consistency = row.at(5);
        p.loss.total = row.at(6);
        ckpt.curve.push_back(p);
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    write_text_file(path, checkpoint_to_json(ckpt).dump());
}

Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_json(nlohmann::json::parse(read_text_file(path)));
}

// ---- prediction & evaluation ----

namespace {

std::vector<std::vector<Detection>> decode_items(const std::vector<FrameItem>& items,
                                                 const ForwardBatch& fb) {
    std::vector<std::vector<Detection>> per_item(items.size());
    const int k = kNumClasses + 1;
    for (size_t o = 0; o < fb.observed_rows.size(); ++o) {
        const int r = fb.observed_rows[o];
        const FrameItem& item = items[fb.item_of_row[r]];
        const double* logits = fb.det.cls.data().data() + o * k;
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (logits[j] > logits[best]) best = j;
        }
        if (best == kNumClasses) continue;  // background
        double mx = logits[best], z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(logits[j] - mx);
        const double confidence = 1.0 / z;  // softmax prob of the argmax class

        std::array<double, kBoxResidualDim> res;
        for (int j = 0; j < kBoxResidualDim; ++j) res[j] = fb.det.box.data()[o * kBoxResidualDim + j];
        const std::array<double, 2> vel = {fb.det.vel.data()[o * 2], fb.det.vel.data()[o * 2 + 1]};

        Detection d;
        d.class_id = best;
        d.confidence = confidence;
        d.box = decode_box(item.record->candidates[item.frame][fb.cand_of_row[r]].box, res, vel);
        d.moving = fb.det.attr.data()[o] > 0.0;
        per_item[fb.item_of_row[r]].push_back(d);
    }
    for (auto& dets : per_item) dets = dedup_detections(std::move(dets), kDedupRadius);
    return per_item;
}

using MaskFn = std::function<std::array<uint8_t, kNumModalities>(const SceneRecord&, int)>;

struct DatasetEval {
    double map = 0.0;
    std::map<double, double> map_by_threshold;
    std::map<std::string, double> per_class;  // threshold-averaged
    TpErrors errors;
};

DatasetEval evaluate_dataset(const Model& model, const std::vector<SceneRecord>& records,
                             const MaskFn& mask_fn, const std::vector<double>& thresholds,
                             double tp_threshold) {
    struct ClassAccum {
        std::map<double, std::vector<ApSample>> samples;
        int gt_count = 0;
    };
    std::array<ClassAccum, kNumClasses> per_class;
    std::vector<MatchedPair> tp_pairs;

    constexpr int kChunkItems = 16;
    std::vector<FrameItem> items;
    std::vector<const std::vector<ObjectInstance>*> gts_of_item;

    auto flush = [&] {
        if (items.empty()) return;
        ForwardBatch fb = forward_frames(model, items);
        auto detections = decode_items(items, fb);
        for (size_t i = 0; i < items.size(); ++i) {
            const auto& gts = *gts_of_item[i];
            for (const auto& g : gts) per_class[g.class_id].gt_count += 1;
            for (double thr : thresholds) {
                MatchingResult mr = match_detections(detections[i], gts, thr);
                std::vector<bool> matched(detections[i].size(), false);
                for (const auto& [pi, gi] : mr.matches) matched[pi] = true;
                for (size_t pi = 0; pi < detections[i].size(); ++pi) {
                    const Detection& d = detections[i][pi];
                    per_class[d.class_id].samples[thr].push_back({d.confidence, matched[pi]});
                }
                if (thr == tp_threshold) {
                    for (const auto& [pi, gi] : mr.matches) {
                        tp_pairs.push_back({detections[i][pi], gts[gi]});
                    }
                }
            }
        }
        items.clear();
        gts_of_item.clear();
    };

    for (const auto& rec : records) {
        for (int f = 0; f < 2; ++f) {
            auto mask = mask_fn(rec, f);
            bool any = false;
            for (uint8_t v : mask) any |= v != 0;
            if (!any) continue;  // frame unusable under this protocol
            items.push_back({&rec, f, mask});
            gts_of_item.push_back(f == 0 ? &rec.pair.frame_t : &rec.pair.frame_t1);
            if (static_cast<int>(items.size()) >= kChunkItems) flush();
        }
    }
    flush();

    DatasetEval out;
    int classes_with_gt = 0;
    for (double thr : thresholds) out.map_by_threshold[thr] = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        if (per_class[c].gt_count == 0) continue;  // class skipped from the mean
        ++classes_with_gt;
        double class_mean = 0.0;
        for (double thr : thresholds) {
            auto it = per_class[c].samples.find(thr);
            const double ap = average_precision(it == per_class[c].samples.end()
                                                    ? std::vector<ApSample>{}
                                                    : it->second,
                                                per_class[c].gt_count);
            out.map_by_threshold[thr] += ap;
            class_mean += ap;
        }
        out.per_class[class_specs()[c].name] = class_mean / thresholds.size();
    }
    if (classes_with_gt > 0) {
        double acc = 0.0;
        for (auto& [thr, v] : out.map_by_threshold) {
            v /= classes_with_gt;
            acc += v;
        }
        out.map = acc / thresholds.size();
    }
    out.errors = tp_error_means(tp_pairs);
    return out;
}

MaskFn stored_mask_fn() {
    return [](const SceneRecord& rec, int f) { return stored_availability_impl(rec, f); };
}

MetricsReport base_report(const Checkpoint& ckpt, const std::string& protocol) {
    MetricsReport r;
    r.protocol = protocol;
    r.seed = ckpt.seed;
    r.config_hash = ckpt.dataset_hash;
    r.trainable_fraction = trainability_report(ckpt.params).fraction;
    return r;
}

void check_dataset_hash(const Checkpoint& ckpt, const DatasetManifest& manifest) {
    if (!ckpt.dataset_hash.empty() && !manifest.config_hash.empty() &&
        ckpt.dataset_hash != manifest.config_hash) {
        throw ContractError("eval: checkpoint and manifest were built from different configs");
    }
}

}  // namespace

std::vector<Detection> predict_frame(const Model& model, const SceneRecord& record, int frame,
                                     const std::array<uint8_t, kNumModalities>& mask) {
    bool any = false;
    for (uint8_t v : mask) any |= v != 0;
    if (!any) throw AvailabilityError("predict_frame: empty modality mask");
    std::vector<FrameItem> items = {{&record, frame, mask}};
    ForwardBatch fb = forward_frames(model, items);
    return decode_items(items, fb)[0];
}

MetricsReport eval_standard(const Checkpoint& ckpt, const DatasetManifest& test) {
    check_dataset_hash(ckpt, test);
    Model model = attach_model(ckpt.params, ckpt.config.model_config());
    std::vector<double> thresholds(kMatchThresholds.begin(), kMatchThresholds.end());
    DatasetEval ev = evaluate_dataset(model, test.records, stored_mask_fn(), thresholds,
                                      kTpErrorThreshold);
    MetricsReport r = base_report(ckpt, "standard");
    r.map = ev.map;
    r.map_by_threshold = ev.map_by_threshold;
    r.per_class = ev.per_class;
    r.errors = ev.errors;
    r.composite = composite_score(ev.map, ev.errors);
    return r;
}

DropoutEvalResult eval_dropout(const Checkpoint& ckpt, const DatasetManifest& test,
                               std::vector<std::vector<Modality>> subsets) {
    check_dataset_hash(ckpt, test);
    if (subsets.empty()) {
        for (int m = 0; m < kNumModalities; ++m) subsets.push_back({static_cast<Modality>(m)});
        subsets.push_back({Modality::Lidar, Modality::Camera});
        subsets.push_back({Modality::Lidar, Modality::Radar, Modality::Camera, Modality::Imu,
                           Modality::Gnss});
    }
    Model model = attach_model(ckpt.params, ckpt.config.model_config());
    std::vector<double> thresholds(kMatchThresholds.begin(), kMatchThresholds.end());

    DropoutEvalResult out;
    out.summary = base_report(ckpt, "dropout");
    for (const auto& subset : subsets) {
        if (subset.empty()) throw ConfigError("eval_dropout: empty subset");
        std::array<uint8_t, kNumModalities> mask{};
        std::string name;
        for (Modality m : subset) {
            mask[static_cast<int>(m)] = 1;
            if (!name.empty()) name += "+";
            name += modality_name(m);
        }
        if (static_cast<int>(subset.size()) == kNumModalities) name = "all";
        // protocol masks override stored availability: every subset is
        // scored on the same frames
        DatasetEval ev = evaluate_dataset(
            model, test.records, [mask](const SceneRecord&, int) { return mask; }, thresholds,
            kTpErrorThreshold);
        MetricsReport r = base_report(ckpt, "dropout");
        r.protocol = "dropout:" + name;
        r.map = ev.map;
        r.map_by_threshold = ev.map_by_threshold;
        r.per_class = ev.per_class;
        r.errors = ev.errors;
        r.composite = composite_score(ev.map, ev.errors);
        out.summary.per_subset[name] = ev.map;
        out.reports.emplace(name, std::move(r));
    }
    return out;
}

WeatherEvalResult eval_weather(const Checkpoint& ckpt, const DatasetManifest& test) {
    check_dataset_hash(ckpt, test);
    Model model = attach_model(ckpt.params, ckpt.config.model_config());
    const std::vector<double> thresholds = {kWeatherApThreshold};

    WeatherEvalResult out;
    out.summary = base_report(ckpt, "weather");
    for (int w = 0; w < 4; ++w) {
        std::vector<SceneRecord> bucket;
        for (const auto& rec : test.records) {
            if (static_cast<int>(rec.pair.weather) == w) bucket.push_back(rec);
        }
        const char* name = weather_name(static_cast<Weather>(w));
        double ap = 0.0;
        if (!bucket.empty()) {
            ap = evaluate_dataset(model, bucket, stored_mask_fn(), thresholds, kWeatherApThreshold)
                     .map;
        }
        out.rows.push_back({name, ap, static_cast<int>(bucket.size() * 2)});
        out.summary.per_condition[name] = ap;
    }
    DatasetEval total =
        evaluate_dataset(model, test.records, stored_mask_fn(), thresholds, kWeatherApThreshold);
    out.rows.push_back({"total", total.map, static_cast<int>(test.records.size() * 2)});
    out.summary.map = total.map;
    out.summary.errors = total.errors;
    out.summary.composite = composite_score(total.map, total.errors);
    return out;
}

namespace {

// per-modality embeddings of the foreground candidates of a manifest,
// keyed by class; respects stored availability and candidate validity
struct EmbeddedRow {
    int class_id;
    std::vector<double> z;
};

std::vector<EmbeddedRow> embed_foreground(const Model& model, const DatasetManifest& manifest,
                                          Modality modality) {
    const int mi = static_cast<int>(modality);
    const int dim = kModalityDims[mi];
    const int d = model.config.embed_dim;
    std::vector<EmbeddedRow> out;
    std::vector<double> flat;
    std::vector<int> classes;
    auto flush = [&] {
        if (classes.empty()) return;
        Tensor x = Tensor::of({static_cast<int>(classes.size()), dim}, flat);
        Tensor z = model.projections[mi].forward(model.encoders[mi].forward(x));
        for (size_t r = 0; r < classes.size(); ++r) {
            EmbeddedRow row;
            row.class_id = classes[r];
            row.z.assign(z.data().begin() + r * d, z.data().begin() + (r + 1) * d);
            out.push_back(std::move(row));
        }
        flat.clear();
        classes.clear();
    };
    for (const auto& rec : manifest.records) {
        for (int f = 0; f < 2; ++f) {
            const auto& feats = rec.features[f][mi];
            if (!feats.available) continue;
            for (size_t c = 0; c < rec.candidates[f].size(); ++c) {
                const int inst = rec.candidates[f][c].assigned_instance;
                if (inst == kNoAssignment || !feats.candidate_valid[c]) continue;
                InstanceInfo info = instance_info(rec, f, inst);
                flat.insert(flat.end(), feats.row(static_cast<int>(c)),
                            feats.row(static_cast<int>(c)) + dim);
                classes.push_back(info.class_id);
                if (static_cast<int>(classes.size()) >= 1024) flush();
            }
        }
    }
    flush();
    return out;
}

}  // namespace

double eval_zero_shot(const Checkpoint& ckpt, const DatasetManifest& train,
                      const DatasetManifest& test) {
    check_dataset_hash(ckpt, train);
    check_dataset_hash(ckpt, test);
    if (train.holdout.empty()) throw ProtocolError("eval_zero_shot: no held-out pairs configured");
    Model model = attach_model(ckpt.params, ckpt.config.model_config());
    const int d = model.config.embed_dim;

    // class prototypes over every modality that observed the class
    std::array<std::vector<double>, kNumClasses> proto_sum;
    std::array<int, kNumClasses> proto_count{};
    for (auto& p : proto_sum) p.assign(d, 0.0);
    for (int m = 0; m < kNumModalities; ++m) {
        if (!modality_is_object_level(static_cast<Modality>(m))) continue;
        for (const auto& row : embed_foreground(model, train, static_cast<Modality>(m))) {
            for (int j = 0; j < d; ++j) proto_sum[row.class_id][j] += row.z[j];
            proto_count[row.class_id] += 1;
        }
    }
    std::array<std::vector<double>, kNumClasses> proto;
    for (int c = 0; c < kNumClasses; ++c) {
        if (proto_count[c] == 0) throw ProtocolError("eval_zero_shot: class never observed in train");
        proto[c] = proto_sum[c];
        double sq = 0;
        for (double v : proto[c]) sq += v * v;
        const double inv = 1.0 / std::sqrt(sq);
        for (double& v : proto[c]) v *= inv;  // renormalized mean
    }

    int correct = 0, total = 0;
    for (const auto& hp : train.holdout) {
        for (const auto& row : embed_foreground(model, test, hp.modality)) {
            if (row.class_id != hp.class_id) continue;
            int best = 0;
            double best_d = 1e300;
            for (int c = 0; c < kNumClasses; ++c) {
                double sq = 0;
                for (int j = 0; j < d; ++j) {
                    sq += (row.z[j] - proto[c][j]) * (row.z[j] - proto[c][j]);
                }
                if (sq < best_d) {
                    best_d = sq;
                    best = c;
                }
            }
            correct += best == hp.class_id;
            ++total;
        }
    }
    if (total == 0) throw ProtocolError("eval_zero_shot: no held-out samples in the test split");
    return static_cast<double>(correct) / total;
}

std::vector<SweepRow> sweep_ranks(const TrainConfig& base, const std::vector<int>& ranks,
                                  const DatasetManifest& train_split,
                                  const DatasetManifest& test_split, const ParameterSet& pretrained,
                                  uint64_t seed) {
    std::vector<SweepRow> rows;
    for (int rank : ranks) {
        TrainConfig cfg = base;
        cfg.lora_rank = rank;
        Checkpoint ckpt = train(cfg, train_split, pretrained, seed);
        MetricsReport report = eval_standard(ckpt, test_split);
        rows.push_back({rank, report.trainable_fraction, report.composite});
    }
    return rows;
}

// ---- CSV emission ----

namespace {

std::string format_double(double v) {
    nlohmann::json j = v;  // shortest round-trip formatting, stable across runs
    return j.dump();
}

}  // namespace

std::string curve_to_csv(const Checkpoint& ckpt) {
    std::string out = "# config_hash=" + ckpt.dataset_hash + " seed=" + std::to_string(ckpt.seed) +
                      "\nstep,det_cls,det_iou,det_orient,metric,consistency,total\n";
    for (const auto& p : ckpt.curve) {
        out += std::to_string(p.step) + "," + format_double(p.loss.det_cls) + "," +
               format_double(p.loss.det_iou) + "," + format_double(p.loss.det_orient) + "," +
               format_double(p.loss.metric) + "," + format_double(p.loss.consistency) + "," +
               format_double(p.loss.total) + "\n";
    }
    return out;
}

std::string weather_to_csv(const std::vector<WeatherRow>& rows, const std::string& config_hash,
                           uint64_t seed) {
    std::string out =
        "# config_hash=" + config_hash + " seed=" + std::to_string(seed) + "\ncondition,ap\n";
    for (const auto& r : rows) out += r.condition + "," + format_double(r.ap) + "\n";
    return out;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows, const std::string& config_hash,
                         uint64_t seed) {
    std::string out = "# config_hash=" + config_hash + " seed=" + std::to_string(seed) +
                      "\nrank,trainable_fraction,composite\n";
    for (const auto& r : rows) {
        out += std::to_string(r.rank) + "," + format_double(r.trainable_fraction) + "," +
               format_double(r.composite) + "\n";
    }
    return out;
}

}  // namespace peftdml
