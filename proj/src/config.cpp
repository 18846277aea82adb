#include "peftdml/config.hpp"

#include <set>

#include "peftdml/checkpoint.hpp"

namespace peftdml {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) throw ConfigError("config: unknown field \"" + key + "\" in " + where);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_world(const json& j, WorldConfig& w) {
    require_object(j, "world");
    reject_unknown(j,
                   {"min_objects", "max_objects", "area_half", "min_separation", "dt",
                    "candidates_per_frame", "pos_jitter", "yaw_jitter", "size_jitter_lo",
                    "size_jitter_hi", "assign_radius", "noise_scale", "scenes_train", "scenes_val",
                    "scenes_test", "holdout"},
                   "world");
    read_field(j, "min_objects", w.min_objects);
    read_field(j, "max_objects", w.max_objects);
    read_field(j, "area_half", w.area_half);
    read_field(j, "min_separation", w.min_separation);
    read_field(j, "dt", w.dt);
    read_field(j, "candidates_per_frame", w.candidates_per_frame);
    read_field(j, "pos_jitter", w.pos_jitter);
    read_field(j, "yaw_jitter", w.yaw_jitter);
    read_field(j, "size_jitter_lo", w.size_jitter_lo);
    read_field(j, "size_jitter_hi", w.size_jitter_hi);
    read_field(j, "assign_radius", w.assign_radius);
    read_field(j, "noise_scale", w.noise_scale);
    read_field(j, "scenes_train", w.scenes_train);
    read_field(j, "scenes_val", w.scenes_val);
    read_field(j, "scenes_test", w.scenes_test);
    if (j.contains("holdout")) {
        w.holdout.clear();
        for (const auto& pair : j.at("holdout")) {
            if (!pair.is_array() || pair.size() != 2) {
                throw ConfigError("config: holdout entries must be [modality, class]");
            }
            w.holdout.push_back({modality_from_name(pair.at(0)), pair.at(1).get<int>()});
        }
    }
}

void parse_pretrain(const json& j, PretrainConfig& p) {
    require_object(j, "pretrain");
    reject_unknown(j, {"epochs", "lr", "batch_frames"}, "pretrain");
    read_field(j, "epochs", p.epochs);
    read_field(j, "lr", p.lr);
    read_field(j, "batch_frames", p.batch_frames);
}

void parse_loss(const json& j, LossConfig& l) {
    require_object(j, "loss");
    reject_unknown(j,
                   {"lambda_det", "lambda_met", "lambda_cons", "margin", "gamma",
                    "cross_modal_consistency"},
                   "train.loss");
    read_field(j, "lambda_det", l.lambda_det);
    read_field(j, "lambda_met", l.lambda_met);
    read_field(j, "lambda_cons", l.lambda_cons);
    read_field(j, "margin", l.margin);
    read_field(j, "gamma", l.gamma);
    read_field(j, "cross_modal_consistency", l.cross_modal_consistency);
}

void parse_train(const json& j, TrainConfig& t) {
    require_object(j, "train");
    reject_unknown(j,
                   {"epochs", "batch_pairs", "lr", "lora_rank", "lora_alpha", "adapter_dim",
                    "hidden", "embed_dim", "detect_hidden", "dropout_prob", "loss"},
                   "train");
    read_field(j, "epochs", t.epochs);
    read_field(j, "batch_pairs", t.batch_pairs);
    read_field(j, "lr", t.lr);
    read_field(j, "lora_rank", t.lora_rank);
    read_field(j, "lora_alpha", t.lora_alpha);
    read_field(j, "adapter_dim", t.adapter_dim);
    read_field(j, "hidden", t.hidden);
    read_field(j, "embed_dim", t.embed_dim);
    read_field(j, "detect_hidden", t.detect_hidden);
    if (j.contains("dropout_prob")) {
        const auto& d = j.at("dropout_prob");
        if (!d.is_array() || d.size() != kNumModalities) {
            throw ConfigError("config: dropout_prob must list one probability per modality");
        }
        for (int m = 0; m < kNumModalities; ++m) t.dropout_prob[m] = d.at(m).get<double>();
    }
    if (j.contains("loss")) parse_loss(j.at("loss"), t.loss);
}

void parse_eval(const json& j, std::vector<std::vector<Modality>>& subsets) {
    require_object(j, "eval");
    reject_unknown(j, {"dropout_subsets"}, "eval");
    if (j.contains("dropout_subsets")) {
        subsets.clear();
        for (const auto& s : j.at("dropout_subsets")) {
            std::vector<Modality> subset;
            for (const auto& name : s) subset.push_back(modality_from_name(name));
            if (subset.empty()) throw ConfigError("config: empty dropout subset");
            subsets.push_back(std::move(subset));
        }
    }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    require_object(j, "top level");
    reject_unknown(j, {"world", "pretrain", "train", "eval"}, "top level");
    RunConfig cfg;
    if (j.contains("world")) parse_world(j.at("world"), cfg.world);
    if (j.contains("pretrain")) parse_pretrain(j.at("pretrain"), cfg.pretrain);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("eval")) parse_eval(j.at("eval"), cfg.dropout_subsets);
    cfg.world.validate();
    cfg.train.validate();
    cfg.config_hash = hash_of_canonical_json(cfg.to_json());
    return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
    json holdout = json::array();
    for (const auto& hp : world.holdout) {
        holdout.push_back(json::array({modality_name(hp.modality), hp.class_id}));
    }
    json subsets = json::array();
    for (const auto& s : dropout_subsets) {
        json names = json::array();
        for (Modality m : s) names.push_back(modality_name(m));
        subsets.push_back(std::move(names));
    }
    return {
        {"world",
         {{"min_objects", world.min_objects},
          {"max_objects", world.max_objects},
          {"area_half", world.area_half},
          {"min_separation", world.min_separation},
          {"dt", world.dt},
          {"candidates_per_frame", world.candidates_per_frame},
          {"pos_jitter", world.pos_jitter},
          {"yaw_jitter", world.yaw_jitter},
          {"size_jitter_lo", world.size_jitter_lo},
          {"size_jitter_hi", world.size_jitter_hi},
          {"assign_radius", world.assign_radius},
          {"noise_scale", world.noise_scale},
          {"scenes_train", world.scenes_train},
          {"scenes_val", world.scenes_val},
          {"scenes_test", world.scenes_test},
          {"holdout", holdout}}},
        {"pretrain",
         {{"epochs", pretrain.epochs}, {"lr", pretrain.lr}, {"batch_frames", pretrain.batch_frames}}},
        {"train",
         {{"epochs", train.epochs},
          {"batch_pairs", train.batch_pairs},
          {"lr", train.lr},
          {"lora_rank", train.lora_rank},
          {"lora_alpha", train.lora_alpha},
          {"adapter_dim", train.adapter_dim},
          {"hidden", train.hidden},
          {"embed_dim", train.embed_dim},
          {"detect_hidden", train.detect_hidden},
          {"dropout_prob", train.dropout_prob},
          {"loss",
           {{"lambda_det", train.loss.lambda_det},
            {"lambda_met", train.loss.lambda_met},
            {"lambda_cons", train.loss.lambda_cons},
            {"margin", train.loss.margin},
            {"gamma", train.loss.gamma},
            {"cross_modal_consistency", train.loss.cross_modal_consistency}}}}},
        {"eval", {{"dropout_subsets", subsets}}},
    };
}

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_of_canonical_json(const nlohmann::json& j) {
    const uint64_t h = fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace peftdml
