#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "peftdml/train.hpp"

namespace peftdml {

// Merged run configuration. Parsing rejects unknown fields at any level;
// the hash is a stable digest of the canonicalized (defaults-filled)
// document, so it changes exactly when a semantic field changes.
struct RunConfig {
    WorldConfig world;
    PretrainConfig pretrain;
    TrainConfig train;
    std::vector<std::vector<Modality>> dropout_subsets;  // empty selects the default set

    std::string config_hash;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load_file(const std::string& path);
    nlohmann::json to_json() const;  // canonical form (defaults filled)
};

uint64_t fnv1a64(const std::string& text);
std::string hash_of_canonical_json(const nlohmann::json& j);

}  // namespace peftdml
