#include "peftdml/world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "peftdml/checkpoint.hpp"

namespace peftdml {

namespace {

constexpr double kPi = 3.14159265358979323846;

// base additive-noise std per modality (before weather scaling)
constexpr std::array<double, kNumModalities> kBaseNoise = {0.03, 0.04, 0.06, 0.02, 0.02};

// lidar reflectivity and radar cross-section per class
constexpr std::array<double, kNumClasses> kReflectivity = {0.5, 0.65, 0.3, 0.35, 0.25, 0.8};
constexpr std::array<double, kNumClasses> kRcs = {1.0, 1.8, 0.15, 0.3, 0.6, 2.5};

// noise multiplier rows: normal, fog, rain, snow; cols: lidar, radar, camera, imu, gnss
constexpr double kNoiseMult[4][kNumModalities] = {
    {1.0, 1.0, 1.0, 1.0, 1.0},
    {1.5, 1.1, 3.0, 1.0, 1.0},
    {2.5, 1.3, 2.5, 1.0, 1.0},
    {2.0, 1.2, 2.0, 1.0, 1.0},
};

constexpr double kDropAddend[4][kNumModalities] = {
    {0.0, 0.0, 0.0, 0.0, 0.0},
    {0.0, 0.0, 0.05, 0.0, 0.0},
    {0.10, 0.0, 0.10, 0.0, 0.0},
    {0.05, 0.0, 0.05, 0.0, 0.0},
};

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

}  // namespace

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Lidar: return "lidar";
        case Modality::Radar: return "radar";
        case Modality::Camera: return "camera";
        case Modality::Imu: return "imu";
        case Modality::Gnss: return "gnss";
    }
    throw ConfigError("unknown modality");
}

bool modality_is_object_level(Modality m) {
    return m == Modality::Lidar || m == Modality::Radar || m == Modality::Camera;
}

Modality modality_from_name(const std::string& name) {
    for (int m = 0; m < kNumModalities; ++m) {
        if (name == modality_name(static_cast<Modality>(m))) return static_cast<Modality>(m);
    }
    throw ConfigError("unknown modality name: " + name);
}

const char* weather_name(Weather w) {
    switch (w) {
        case Weather::Normal: return "normal";
        case Weather::Fog: return "fog";
        case Weather::Rain: return "rain";
        case Weather::Snow: return "snow";
    }
    throw ConfigError("unknown weather");
}

Weather weather_from_name(const std::string& name) {
    for (int w = 0; w < 4; ++w) {
        if (name == weather_name(static_cast<Weather>(w))) return static_cast<Weather>(w);
    }
    throw ConfigError("unknown weather name: " + name);
}

double weather_noise_multiplier(Weather w, Modality m) {
    return kNoiseMult[static_cast<int>(w)][static_cast<int>(m)];
}

double weather_dropout_addend(Weather w, Modality m) {
    return kDropAddend[static_cast<int>(w)][static_cast<int>(m)];
}

double wrap_angle(double a) {
    double w = a - 2.0 * kPi * std::floor((a + kPi) / (2.0 * kPi));
    if (w >= kPi) w -= 2.0 * kPi;  // guard against rounding at the boundary
    return w;
}

double Box3D::speed() const { return std::sqrt(vx * vx + vy * vy); }

double Box3D::center_dist_2d(const Box3D& other) const {
    const double dx = x - other.x, dy = y - other.y;
    return std::sqrt(dx * dx + dy * dy);
}

bool AvailabilityMask::any() const {
    for (uint8_t a : available) {
        if (a) return true;
    }
    return false;
}

const std::array<ClassSpec, kNumClasses>& class_specs() {
    static const std::array<ClassSpec, kNumClasses> specs = {{
        {"car", 1.9, 4.6, 1.7, 12.0},
        {"truck", 2.5, 7.5, 3.0, 10.0},
        {"pedestrian", 0.7, 0.7, 1.8, 1.5},
        {"bicycle", 0.7, 1.9, 1.4, 6.0},
        {"barrier", 0.5, 2.2, 1.0, 0.0},
        {"bus", 2.9, 11.0, 3.5, 9.0},
    }};
    return specs;
}

void WorldConfig::validate() const {
    if (min_objects < 0 || max_objects < min_objects) throw ConfigError("world: bad object counts");
    if (area_half <= 0) throw ConfigError("world: area must be positive");
    if (candidates_per_frame < max_objects) throw ConfigError("world: too few candidates per frame");
    if (size_jitter_lo <= 0 || size_jitter_hi < size_jitter_lo) throw ConfigError("world: bad size jitter");
    if (assign_radius <= 0) throw ConfigError("world: bad assignment radius");
    if (noise_scale < 0) throw ConfigError("world: negative noise scale");
    if (scenes_train < 0 || scenes_val < 0 || scenes_test < 0) throw ConfigError("world: bad split sizes");
    for (const auto& hp : holdout) {
        if (hp.class_id < 0 || hp.class_id >= kNumClasses) throw ConfigError("world: holdout class out of range");
    }
}

ScenePair generate_scene(uint64_t global_seed, int scene_index, const WorldConfig& config) {
    config.validate();
    Rng rng(stable_hash(global_seed, static_cast<uint64_t>(scene_index)));
    ScenePair scene;
    scene.scene_id = scene_index;
    scene.weather = static_cast<Weather>(rng.uniform_int(4));

    EgoState ego;
    ego.x = rng.uniform(-5.0, 5.0);
    ego.y = rng.uniform(-5.0, 5.0);
    ego.yaw = rng.uniform(-kPi, kPi);
    const double ego_speed = rng.uniform(0.0, 8.0);
    ego.vx = ego_speed * std::cos(ego.yaw);
    ego.vy = ego_speed * std::sin(ego.yaw);
    ego.ax = rng.uniform(-1.5, 1.5);
    ego.ay = rng.uniform(-1.5, 1.5);
    ego.yaw_rate = rng.uniform(-0.3, 0.3);
    scene.ego_t = ego;

    const int count = config.min_objects + (config.max_objects > config.min_objects
                                                ? rng.uniform_int(config.max_objects - config.min_objects + 1)
                                                : 0);
    for (int i = 0; i < count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            ObjectInstance obj;
            obj.instance_id = i;
            obj.class_id = rng.uniform_int(kNumClasses);
            const ClassSpec& spec = class_specs()[obj.class_id];
            const double size_u = rng.uniform(0.9, 1.1);
            obj.box.w = spec.w * size_u;
            obj.box.l = spec.l * size_u;
            obj.box.h = spec.h * size_u;
            obj.box.x = rng.uniform(-config.area_half, config.area_half);
            obj.box.y = rng.uniform(-config.area_half, config.area_half);
            obj.box.z = obj.box.h / 2.0;
            obj.box.yaw = wrap_angle(rng.uniform(-kPi, kPi));
            double speed = 0.0;
            if (spec.vmax > 0.0 && !rng.bernoulli(0.3)) speed = rng.uniform(0.8, spec.vmax);
            obj.box.vx = speed * std::cos(obj.box.yaw);
            obj.box.vy = speed * std::sin(obj.box.yaw);
            obj.moving = obj.box.speed() > 0.5;

            bool collides = false;
            for (const auto& other : scene.frame_t) {
                if (obj.box.center_dist_2d(other.box) < config.min_separation) {
                    collides = true;
                    break;
                }
            }
            if (!collides) {
                scene.frame_t.push_back(obj);
                placed = true;
            }
        }
        if (!placed) throw Error("generate_scene: unsatisfiable placement after 1000 attempts");
    }

    scene.frame_t1 = scene.frame_t;
    for (auto& obj : scene.frame_t1) {
        obj.box.x += obj.box.vx * config.dt;
        obj.box.y += obj.box.vy * config.dt;
    }
    scene.ego_t1 = scene.ego_t;
    scene.ego_t1.x += ego.vx * config.dt;
    scene.ego_t1.y += ego.vy * config.dt;
    scene.ego_t1.yaw = wrap_angle(ego.yaw + ego.yaw_rate * config.dt);
    scene.ego_t1.vx = ego.vx + ego.ax * config.dt;
    scene.ego_t1.vy = ego.vy + ego.ay * config.dt;
    return scene;
}

std::vector<CandidateAnchor> make_candidates(const std::vector<ObjectInstance>& frame,
                                             uint64_t seed, const WorldConfig& config,
                                             int frame_tag) {
    if (static_cast<int>(frame.size()) > config.candidates_per_frame) {
        throw ConfigError("make_candidates: more objects than candidate slots");
    }
    Rng rng(seed);
    std::vector<CandidateAnchor> out;
    out.reserve(config.candidates_per_frame);

    for (const auto& obj : frame) {
        CandidateAnchor c;
        c.assigned_instance = obj.instance_id;
        c.frame = frame_tag;
        while (true) {
            const double dx = rng.normal(0.0, config.pos_jitter);
            const double dy = rng.normal(0.0, config.pos_jitter);
            const double dz = rng.normal(0.0, config.pos_jitter * 0.2);
            if (std::sqrt(dx * dx + dy * dy) > config.assign_radius) continue;
            const double su = rng.uniform(config.size_jitter_lo, config.size_jitter_hi);
            c.box = obj.box;
            c.box.x += dx;
            c.box.y += dy;
            c.box.z += dz;
            c.box.w *= su;
            c.box.l *= su;
            c.box.h *= su;
            c.box.yaw = wrap_angle(obj.box.yaw + rng.normal(0.0, config.yaw_jitter));
            c.box.vx = 0.0;
            c.box.vy = 0.0;
            break;
        }
        out.push_back(c);
    }

    while (static_cast<int>(out.size()) < config.candidates_per_frame) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            CandidateAnchor c;
            c.assigned_instance = kNoAssignment;
            c.frame = frame_tag;
            const int cls = rng.uniform_int(kNumClasses);
            const ClassSpec& spec = class_specs()[cls];
            const double su = rng.uniform(config.size_jitter_lo, config.size_jitter_hi);
            c.box.w = spec.w * su;
            c.box.l = spec.l * su;
            c.box.h = spec.h * su;
            c.box.x = rng.uniform(-config.area_half, config.area_half);
            c.box.y = rng.uniform(-config.area_half, config.area_half);
            c.box.z = c.box.h / 2.0;
            c.box.yaw = wrap_angle(rng.uniform(-kPi, kPi));
            bool near = false;
            for (const auto& obj : frame) {
                if (c.box.center_dist_2d(obj.box) <= config.assign_radius) {
                    near = true;
                    break;
                }
            }
            if (!near) {
                out.push_back(c);
                placed = true;
            }
        }
        if (!placed) throw Error("make_candidates: unsatisfiable background placement");
    }
    return out;
}

namespace {

struct SimPoint {
    double x, y, z, intensity;
};

// simple occlusion model: expected in-box point count decays with range
int expected_point_count(double dist, Rng& rng) {
    const double expectation = 60.0 * std::exp(-dist / 15.0);
    const double jitter = rng.uniform(0.85, 1.15);
    return std::max(1, static_cast<int>(std::llround(expectation * jitter)));
}

std::vector<SimPoint> simulate_object_points(const ObjectInstance& obj, const EgoState& ego, Rng& rng) {
    const double dx = obj.box.x - ego.x, dy = obj.box.y - ego.y;
    const double dist = std::sqrt(dx * dx + dy * dy);
    const int n = expected_point_count(dist, rng);
    std::vector<SimPoint> pts(n);
    const double cy = std::cos(obj.box.yaw), sy = std::sin(obj.box.yaw);
    for (auto& p : pts) {
        const double u = rng.uniform(-0.5, 0.5) * obj.box.l;
        const double v = rng.uniform(-0.5, 0.5) * obj.box.w;
        p.x = obj.box.x + u * cy - v * sy;
        p.y = obj.box.y + u * sy + v * cy;
        p.z = obj.box.z + rng.uniform(-0.5, 0.5) * obj.box.h;
        p.intensity = kReflectivity[obj.class_id] * rng.uniform(0.7, 1.0);
    }
    return pts;
}

bool point_in_box(const SimPoint& p, const Box3D& box) {
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    const double rx = p.x - box.x, ry = p.y - box.y;
    const double u = rx * cy + ry * sy;
    const double v = -rx * sy + ry * cy;
    return std::fabs(u) <= box.l / 2 && std::fabs(v) <= box.w / 2 && std::fabs(p.z - box.z) <= box.h / 2;
}

void render_lidar_row(double* f, const std::vector<SimPoint>& pts, const Box3D& cand,
                      const EgoState& ego) {
    const int n = static_cast<int>(pts.size());
    if (n > 0) {
        double cx = 0, cy = 0, cz = 0;
        double mn[3] = {1e18, 1e18, 1e18}, mx[3] = {-1e18, -1e18, -1e18};
        int inside = 0;
        for (const auto& p : pts) {
            const double dx = p.x - cand.x, dy = p.y - cand.y;
            const double r = std::sqrt(dx * dx + dy * dy);
            f[std::min(7, static_cast<int>(r / 0.5))] += 1.0 / n;  // ring histogram, 0.5 m bins
            const double zrel = std::clamp((p.z - (cand.z - cand.h / 2)) / std::max(cand.h, 1e-6), 0.0, 0.999);
            f[15 + static_cast<int>(zrel * 4.0)] += 1.0 / n;  // height histogram
            cx += p.x; cy += p.y; cz += p.z;
            mn[0] = std::min(mn[0], p.x); mx[0] = std::max(mx[0], p.x);
            mn[1] = std::min(mn[1], p.y); mx[1] = std::max(mx[1], p.y);
            mn[2] = std::min(mn[2], p.z); mx[2] = std::max(mx[2], p.z);
            if (point_in_box(p, cand)) ++inside;
        }
        f[8] = std::clamp(cx / n - cand.x, -3.0, 3.0);
        f[9] = std::clamp(cy / n - cand.y, -3.0, 3.0);
        f[10] = std::clamp(cz / n - cand.z, -3.0, 3.0);
        f[11] = mx[0] - mn[0];
        f[12] = mx[1] - mn[1];
        f[13] = mx[2] - mn[2];
        f[14] = n / 60.0;
        double isum = 0;
        for (const auto& p : pts) isum += p.intensity;
        f[19] = isum / n;
        f[23] = static_cast<double>(inside) / n;
    }
    const double ddx = cand.x - ego.x, ddy = cand.y - ego.y;
    f[20] = std::sqrt(ddx * ddx + ddy * ddy) / 40.0;
    f[21] = std::cos(cand.yaw);
    f[22] = std::sin(cand.yaw);
}

void render_radar_row(double* f, const Box3D& src, int class_id, const EgoState& ego) {
    const double dx = src.x - ego.x, dy = src.y - ego.y;
    const double dist = std::max(std::sqrt(dx * dx + dy * dy), 1e-6);
    const double losx = dx / dist, losy = dy / dist;
    const double rvx = src.vx - ego.vx, rvy = src.vy - ego.vy;
    const double radial = rvx * losx + rvy * losy;
    const double tangential = -rvx * losy + rvy * losx;
    const double rcs = class_id >= 0 ? kRcs[class_id] : 0.05;
    const double intensity = rcs / (1.0 + (dist / 20.0) * (dist / 20.0));
    f[0] = dist / 40.0;
    f[1] = wrap_angle(std::atan2(dy, dx) - ego.yaw) / kPi;
    f[2] = radial / 10.0;
    f[3] = tangential / 10.0;
    f[4] = intensity;
    f[5] = rcs;
    f[6] = std::atan2(src.z, dist) / kPi;
    f[7] = intensity * (1.0 - dist / 80.0);
}

void render_camera_row(double* f, const Box3D& src, int class_id, const EgoState& ego) {
    const double dx = src.x - ego.x, dy = src.y - ego.y;
    const double r = std::max(std::sqrt(dx * dx + dy * dy), 2.0);
    f[0] = wrap_angle(std::atan2(dy, dx) - ego.yaw) / kPi;
    f[1] = src.z / r;
    f[2] = std::sqrt(src.w * src.l) / r;
    f[3] = src.h / r;
    if (class_id >= 0) {
        // fixed orthogonal class-pattern code: two hot dims per class
        f[4 + 2 * class_id] = 1.0;
        f[4 + 2 * class_id + 1] = 1.0;
    }
}

}  // namespace

ModalityFeatures render_modality(const std::vector<ObjectInstance>& frame,
                                 const std::vector<CandidateAnchor>& candidates, Modality modality,
                                 Weather weather, uint64_t seed, const EgoState& ego,
                                 const WorldConfig& config) {
    const int mi = static_cast<int>(modality);
    if (mi < 0 || mi >= kNumModalities) throw ConfigError("render_modality: unknown modality");
    const int dim = kModalityDims[mi];
    const int n = static_cast<int>(candidates.size());
    const double noise_std = kBaseNoise[mi] * weather_noise_multiplier(weather, modality) * config.noise_scale;

    ModalityFeatures out;
    out.modality = modality;
    out.dim = dim;
    out.candidates = n;
    out.values.assign(static_cast<size_t>(n) * dim, 0.0);
    out.available = true;
    out.candidate_valid.assign(n, 1);

    Rng rng(stable_hash(seed, static_cast<uint64_t>(mi) + 7001));

    auto find_instance = [&](int id) -> const ObjectInstance* {
        for (const auto& obj : frame) {
            if (obj.instance_id == id) return &obj;
        }
        throw ContractError("render_modality: candidate references unknown instance");
    };

    switch (modality) {
        case Modality::Lidar: {
            // simulate per-object point clouds first, then per-candidate clutter
            std::vector<std::vector<SimPoint>> obj_points;
            obj_points.reserve(frame.size());
            for (const auto& obj : frame) obj_points.push_back(simulate_object_points(obj, ego, rng));
            for (int c = 0; c < n; ++c) {
                double* f = out.values.data() + static_cast<int64_t>(c) * dim;
                if (candidates[c].assigned_instance != kNoAssignment) {
                    const ObjectInstance* obj = find_instance(candidates[c].assigned_instance);
                    size_t oi = 0;
                    for (; oi < frame.size(); ++oi) {
                        if (frame[oi].instance_id == obj->instance_id) break;
                    }
                    render_lidar_row(f, obj_points[oi], candidates[c].box, ego);
                } else {
                    std::vector<SimPoint> clutter(rng.uniform_int(3));
                    for (auto& p : clutter) {
                        p.x = candidates[c].box.x + rng.uniform(-1.5, 1.5);
                        p.y = candidates[c].box.y + rng.uniform(-1.5, 1.5);
                        p.z = rng.uniform(0.0, 1.0);
                        p.intensity = 0.1 * rng.uniform(0.5, 1.0);
                    }
                    render_lidar_row(f, clutter, candidates[c].box, ego);
                }
            }
            break;
        }
        case Modality::Radar:
        case Modality::Camera: {
            for (int c = 0; c < n; ++c) {
                double* f = out.values.data() + static_cast<int64_t>(c) * dim;
                const Box3D* src = &candidates[c].box;
                int cls = -1;
                if (candidates[c].assigned_instance != kNoAssignment) {
                    const ObjectInstance* obj = find_instance(candidates[c].assigned_instance);
                    src = &obj->box;
                    cls = obj->class_id;
                }
                if (modality == Modality::Radar) {
                    render_radar_row(f, *src, cls, ego);
                } else {
                    render_camera_row(f, *src, cls, ego);
                }
            }
            break;
        }
        case Modality::Imu: {
            // ego-level signal: one noisy draw broadcast to every candidate
            double base[3] = {ego.ax, ego.ay, ego.yaw_rate};
            double row[6];
            for (int j = 0; j < 6; ++j) row[j] = base[j % 3] + rng.normal(0.0, noise_std);
            for (int c = 0; c < n; ++c) {
                std::copy_n(row, 6, out.values.data() + static_cast<int64_t>(c) * dim);
            }
            return out;
        }
        case Modality::Gnss: {
            double row[3] = {ego.x / 20.0 + rng.normal(0.0, noise_std),
                             ego.y / 20.0 + rng.normal(0.0, noise_std),
                             rng.normal(0.0, noise_std)};
            for (int c = 0; c < n; ++c) {
                std::copy_n(row, 3, out.values.data() + static_cast<int64_t>(c) * dim);
            }
            return out;
        }
    }

    if (noise_std > 0.0) {
        for (auto& v : out.values) v += rng.normal(0.0, noise_std);
    }
    return out;
}

AvailabilityMask sample_dropout_mask(uint64_t seed,
                                     const std::array<double, kNumModalities>& dropout_prob) {
    bool possible = false;
    for (double p : dropout_prob) {
        if (p < 1.0) possible = true;
    }
    if (!possible) throw ConfigError("sample_dropout_mask: all dropout probabilities are 1");
    Rng rng(seed);
    AvailabilityMask mask;
    do {
        for (int m = 0; m < kNumModalities; ++m) {
            mask.available[m] = rng.uniform() < dropout_prob[m] ? 0 : 1;
        }
    } while (!mask.any());
    return mask;
}

SceneRecord build_scene_record(uint64_t global_seed, int scene_index, const WorldConfig& config) {
    SceneRecord rec;
    rec.pair = generate_scene(global_seed, scene_index, config);
    const uint64_t scene_seed = stable_hash(global_seed, static_cast<uint64_t>(scene_index));
    for (int f = 0; f < 2; ++f) {
        const auto& frame = f == 0 ? rec.pair.frame_t : rec.pair.frame_t1;
        const EgoState& ego = f == 0 ? rec.pair.ego_t : rec.pair.ego_t1;
        rec.candidates[f] = make_candidates(frame, stable_hash(scene_seed, 100 + f), config, f);
        Rng avail_rng(stable_hash(scene_seed, 300 + f));
        for (int m = 0; m < kNumModalities; ++m) {
            rec.features[f][m] =
                render_modality(frame, rec.candidates[f], static_cast<Modality>(m), rec.pair.weather,
                                stable_hash(scene_seed, 200 + f * 16 + m), ego, config);
            const double p = weather_dropout_addend(rec.pair.weather, static_cast<Modality>(m));
            rec.features[f][m].available = !(avail_rng.uniform() < p);
        }
    }
    return rec;
}

namespace {

int class_of_instance(const std::vector<ObjectInstance>& frame, int instance_id) {
    for (const auto& obj : frame) {
        if (obj.instance_id == instance_id) return obj.class_id;
    }
    throw ContractError("manifest: candidate references unknown instance");
}

void apply_holdout(SceneRecord& rec, const std::vector<HoldoutPair>& holdout) {
    for (int f = 0; f < 2; ++f) {
        const auto& frame = f == 0 ? rec.pair.frame_t : rec.pair.frame_t1;
        for (const auto& hp : holdout) {
            auto& feats = rec.features[f][static_cast<int>(hp.modality)];
            for (size_t c = 0; c < rec.candidates[f].size(); ++c) {
                const int assigned = rec.candidates[f][c].assigned_instance;
                if (assigned == kNoAssignment) continue;
                if (class_of_instance(frame, assigned) == hp.class_id) {
                    feats.candidate_valid[c] = 0;
                    std::fill_n(feats.values.begin() + static_cast<int64_t>(c) * feats.dim, feats.dim, 0.0);
                }
            }
        }
    }
}

DatasetManifest build_split(const WorldConfig& config, uint64_t global_seed,
                            const std::string& config_hash, const std::string& split, int first,
                            int count, bool with_holdout) {
    DatasetManifest m;
    m.split = split;
    m.seed = global_seed;
    m.config_hash = config_hash;
    m.holdout = with_holdout ? config.holdout : std::vector<HoldoutPair>{};
    m.records.reserve(count);
    for (int i = 0; i < count; ++i) {
        SceneRecord rec = build_scene_record(global_seed, first + i, config);
        if (with_holdout) apply_holdout(rec, config.holdout);
        m.records.push_back(std::move(rec));
    }
    return m;
}

}  // namespace

DatasetBundle build_dataset(const WorldConfig& config, uint64_t global_seed,
                            const std::string& config_hash) {
    config.validate();
    DatasetBundle b;
    b.train = build_split(config, global_seed, config_hash, "train", 0, config.scenes_train, true);
    b.val = build_split(config, global_seed, config_hash, "val", config.scenes_train,
                        config.scenes_val, false);
    b.test = build_split(config, global_seed, config_hash, "test",
                         config.scenes_train + config.scenes_val, config.scenes_test, false);
    return b;
}

// ---- serialization ----

namespace {

using nlohmann::json;

json box_to_json(const Box3D& b) {
    return json::array({b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, b.vx, b.vy});
}

Box3D box_from_json(const json& j) {
    Box3D b;
    b.x = j.at(0);
    b.y = j.at(1);
    b.z = j.at(2);
    b.w = j.at(3);
    b.l = j.at(4);
    b.h = j.at(5);
    b.yaw = j.at(6);
    b.vx = j.at(7);
    b.vy = j.at(8);
    return b;
}

json ego_to_json(const EgoState& e) {
    return json::array({e.x, e.y, e.yaw, e.vx, e.vy, e.ax, e.ay, e.yaw_rate});
}

EgoState ego_from_json(const json& j) {
    EgoState e;
    e.x = j.at(0);
    e.y = j.at(1);
    e.yaw = j.at(2);
    e.vx = j.at(3);
    e.vy = j.at(4);
    e.ax = j.at(5);
    e.ay = j.at(6);
    e.yaw_rate = j.at(7);
    return e;
}

json record_to_json(const SceneRecord& rec) {
    json j;
    j["scene_id"] = rec.pair.scene_id;
    j["weather"] = weather_name(rec.pair.weather);
    j["ego_t"] = ego_to_json(rec.pair.ego_t);
    j["ego_t1"] = ego_to_json(rec.pair.ego_t1);
    json frames = json::array();
    for (int f = 0; f < 2; ++f) {
        json jf;
        json objs = json::array();
        for (const auto& obj : (f == 0 ? rec.pair.frame_t : rec.pair.frame_t1)) {
            objs.push_back({{"id", obj.instance_id},
                            {"class", obj.class_id},
                            {"box", box_to_json(obj.box)},
                            {"moving", obj.moving}});
        }
        jf["objects"] = std::move(objs);
        json cands = json::array();
        for (const auto& c : rec.candidates[f]) {
            cands.push_back({{"box", box_to_json(c.box)}, {"assigned", c.assigned_instance}});
        }
        jf["candidates"] = std::move(cands);
        json feats = json::object();
        for (int m = 0; m < kNumModalities; ++m) {
            const auto& mf = rec.features[f][m];
            feats[modality_name(static_cast<Modality>(m))] = {
                {"available", mf.available},
                {"valid", mf.candidate_valid},
                {"data", doubles_to_base64(mf.values)}};
        }
        jf["features"] = std::move(feats);
        frames.push_back(std::move(jf));
    }
    j["frames"] = std::move(frames);
    return j;
}

SceneRecord record_from_json(const json& j) {
    SceneRecord rec;
    rec.pair.scene_id = j.at("scene_id");
    rec.pair.weather = weather_from_name(j.at("weather"));
    rec.pair.ego_t = ego_from_json(j.at("ego_t"));
    rec.pair.ego_t1 = ego_from_json(j.at("ego_t1"));
    const json& frames = j.at("frames");
    for (int f = 0; f < 2; ++f) {
        const json& jf = frames.at(f);
        auto& objs = f == 0 ? rec.pair.frame_t : rec.pair.frame_t1;
        for (const auto& jo : jf.at("objects")) {
            ObjectInstance obj;
            obj.instance_id = jo.at("id");
            obj.class_id = jo.at("class");
            obj.box = box_from_json(jo.at("box"));
            obj.moving = jo.at("moving");
            objs.push_back(obj);
        }
        for (const auto& jc : jf.at("candidates")) {
            CandidateAnchor c;
            c.box = box_from_json(jc.at("box"));
            c.assigned_instance = jc.at("assigned");
            c.frame = f;
            rec.candidates[f].push_back(c);
        }
        for (int m = 0; m < kNumModalities; ++m) {
            const json& jm = jf.at("features").at(modality_name(static_cast<Modality>(m)));
            auto& mf = rec.features[f][m];
            mf.modality = static_cast<Modality>(m);
            mf.dim = kModalityDims[m];
            mf.available = jm.at("available");
            mf.candidate_valid = jm.at("valid").get<std::vector<uint8_t>>();
            mf.values = base64_to_doubles(jm.at("data"));
            mf.candidates = static_cast<int>(rec.candidates[f].size());
            if (static_cast<int>(mf.values.size()) != mf.candidates * mf.dim) {
                throw IoError("manifest: feature array size mismatch");
            }
        }
    }
    return rec;
}

}  // namespace

std::string manifest_to_jsonl(const DatasetManifest& manifest) {
    json header;
    header["version"] = 1;
    header["split"] = manifest.split;
    header["config_hash"] = manifest.config_hash;
    header["seed"] = manifest.seed;
    json holdout = json::array();
    for (const auto& hp : manifest.holdout) {
        holdout.push_back(json::array({modality_name(hp.modality), hp.class_id}));
    }
    header["holdout"] = std::move(holdout);

    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& rec : manifest.records) {
        out += record_to_json(rec).dump();
        out.push_back('\n');
    }
    return out;
}

DatasetManifest manifest_from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError("manifest: empty file");
    json header = json::parse(line);
    if (header.at("version").get<int>() != 1) throw IoError("manifest: unsupported version");
    DatasetManifest m;
    m.split = header.at("split");
    m.config_hash = header.at("config_hash");
    m.seed = header.at("seed");
    for (const auto& jh : header.at("holdout")) {
        m.holdout.push_back({modality_from_name(jh.at(0)), jh.at(1).get<int>()});
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        m.records.push_back(record_from_json(json::parse(line)));
    }
    return m;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
    write_text_file(path, manifest_to_jsonl(manifest));
}

DatasetManifest load_manifest(const std::string& path) {
    return manifest_from_jsonl(read_text_file(path));
}

}  // namespace peftdml
