#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "peftdml/errors.hpp"
#include "peftdml/rng.hpp"

namespace peftdml {

inline constexpr int kNumModalities = 5;
inline constexpr int kNumClasses = 6;

enum class Modality { Lidar = 0, Radar = 1, Camera = 2, Imu = 3, Gnss = 4 };
enum class Weather { Normal = 0, Fog = 1, Rain = 2, Snow = 3 };

const char* modality_name(Modality m);
// lidar/radar/camera carry per-candidate signal; imu/gnss are ego-level
bool modality_is_object_level(Modality m);
Modality modality_from_name(const std::string& name);
const char* weather_name(Weather w);
Weather weather_from_name(const std::string& name);

// raw feature dimensions: lidar, radar, camera, imu, gnss
inline constexpr std::array<int, kNumModalities> kModalityDims = {24, 8, 16, 6, 3};

// additive-noise std multiplier, indexed [weather][modality]
double weather_noise_multiplier(Weather w, Modality m);
// extra per-frame unavailability probability, indexed [weather][modality]
double weather_dropout_addend(Weather w, Modality m);

double wrap_angle(double a);  // -> [-pi, pi)

struct Box3D {
    double x = 0, y = 0, z = 0;    // center, meters
    double w = 1, l = 1, h = 1;    // size, meters (positive)
    double yaw = 0;                // radians, wrapped to [-pi, pi)
    double vx = 0, vy = 0;         // m/s

    double speed() const;
    double center_dist_2d(const Box3D& other) const;
    bool operator==(const Box3D&) const = default;
};

struct ObjectInstance {
    int instance_id = 0;
    int class_id = 0;  // 0..kNumClasses-1
    Box3D box;
    bool moving = false;  // true iff speed > 0.5 m/s
    bool operator==(const ObjectInstance&) const = default;
};

struct EgoState {
    double x = 0, y = 0, yaw = 0;
    double vx = 0, vy = 0;
    double ax = 0, ay = 0, yaw_rate = 0;
    bool operator==(const EgoState&) const = default;
};

struct ScenePair {
    int scene_id = 0;
    std::vector<ObjectInstance> frame_t;
    std::vector<ObjectInstance> frame_t1;  // constant-velocity propagation by dt
    Weather weather = Weather::Normal;
    EgoState ego_t;
    EgoState ego_t1;
    bool operator==(const ScenePair&) const = default;
};

inline constexpr int kNoAssignment = -1;

struct CandidateAnchor {
    Box3D box;
    int assigned_instance = kNoAssignment;
    int frame = 0;  // 0 = t, 1 = t+1
    bool operator==(const CandidateAnchor&) const = default;
};

struct ModalityFeatures {
    Modality modality = Modality::Lidar;
    int dim = 0;
    int candidates = 0;
    std::vector<double> values;           // candidates x dim, row major
    bool available = true;                // frame-level availability
    std::vector<uint8_t> candidate_valid; // per-candidate holdout validity

    const double* row(int candidate) const { return values.data() + static_cast<int64_t>(candidate) * dim; }
    bool operator==(const ModalityFeatures&) const = default;
};

struct AvailabilityMask {
    std::array<uint8_t, kNumModalities> available{};
    bool any() const;
    uint8_t& operator[](Modality m) { return available[static_cast<int>(m)]; }
    uint8_t operator[](Modality m) const { return available[static_cast<int>(m)]; }
    bool operator==(const AvailabilityMask&) const = default;
};

struct SceneRecord {
    ScenePair pair;
    std::array<std::vector<CandidateAnchor>, 2> candidates;                 // per frame
    std::array<std::array<ModalityFeatures, kNumModalities>, 2> features;  // [frame][modality]
    bool operator==(const SceneRecord&) const = default;
};

struct HoldoutPair {
    Modality modality = Modality::Camera;
    int class_id = 0;
    bool operator==(const HoldoutPair&) const = default;
};

struct DatasetManifest {
    std::string split;
    uint64_t seed = 0;
    std::string config_hash;
    std::vector<HoldoutPair> holdout;
    std::vector<SceneRecord> records;
    bool operator==(const DatasetManifest&) const = default;
};

struct WorldConfig {
    int min_objects = 1;
    int max_objects = 8;
    double area_half = 20.0;       // scene spans [-area_half, area_half]^2
    double min_separation = 1.0;   // center-to-center rejection radius
    double dt = 0.5;
    int candidates_per_frame = 32;
    double pos_jitter = 0.5;       // std of positive-anchor center jitter, meters
    double yaw_jitter = 0.3;       // std, radians
    double size_jitter_lo = 0.8;
    double size_jitter_hi = 1.2;
    double assign_radius = 2.0;    // 2D assignment distance, meters
    double noise_scale = 1.0;      // global multiplier on rendering noise
    int scenes_train = 500;
    int scenes_val = 100;
    int scenes_test = 100;
    std::vector<HoldoutPair> holdout = {{Modality::Camera, 2}};

    void validate() const;
};

// class geometry table (width, length, height, max speed)
struct ClassSpec {
    const char* name;
    double w, l, h, vmax;
};
const std::array<ClassSpec, kNumClasses>& class_specs();

// Deterministic function of (global_seed, scene_index) only.
ScenePair generate_scene(uint64_t global_seed, int scene_index, const WorldConfig& config);

// One jittered positive anchor per object plus background anchors up to
// candidates_per_frame. Positive anchors land within assign_radius (2D)
// of their instance; background anchors farther than it from all.
std::vector<CandidateAnchor> make_candidates(const std::vector<ObjectInstance>& frame,
                                             uint64_t seed, const WorldConfig& config,
                                             int frame_tag);

ModalityFeatures render_modality(const std::vector<ObjectInstance>& frame,
                                 const std::vector<CandidateAnchor>& candidates, Modality modality,
                                 Weather weather, uint64_t seed, const EgoState& ego,
                                 const WorldConfig& config);

// Independent Bernoulli survival per modality, resampled until at least
// one modality remains. All probabilities >= 1 is a config error.
AvailabilityMask sample_dropout_mask(uint64_t seed,
                                     const std::array<double, kNumModalities>& dropout_prob);

SceneRecord build_scene_record(uint64_t global_seed, int scene_index, const WorldConfig& config);

struct DatasetBundle {
    DatasetManifest train;
    DatasetManifest val;
    DatasetManifest test;
};

// Splits use disjoint scene-index ranges of one deterministic stream.
// The zero-shot holdout is applied to the train split only.
DatasetBundle build_dataset(const WorldConfig& config, uint64_t global_seed,
                            const std::string& config_hash);

// JSON-lines: header line, then one scene record per line.
std::string manifest_to_jsonl(const DatasetManifest& manifest);
DatasetManifest manifest_from_jsonl(const std::string& text);
void write_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace peftdml
