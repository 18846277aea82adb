#pragma once

#include "peftdml/losses.hpp"
#include "peftdml/metrics.hpp"
#include "peftdml/model.hpp"

namespace peftdml {

struct TrainConfig {
    int epochs = 20;
    int batch_pairs = 4;  // scene pairs per step, i.e. 8 frames
    double lr = 1e-3;
    int lora_rank = 8;
    double lora_alpha = 0.0;  // 0 selects alpha = 2r
    int adapter_dim = 2;
    int hidden = 672;
    int embed_dim = 16;
    int detect_hidden = 32;
    std::array<double, kNumModalities> dropout_prob = {0.2, 0.2, 0.2, 0.2, 0.2};
    LossConfig loss;

    void validate() const;
    ModelConfig model_config() const;
};

struct CurvePoint {
    int step = 0;
    LossBreakdown loss;
};

struct Checkpoint {
    ParameterSet params;
    TrainConfig config;
    uint64_t seed = 0;
    std::string dataset_hash;
    std::vector<CurvePoint> curve;
};

// Joint training of all PEFT/projection/fusion/detection parameters on the
// batched two-frame objective. Deterministic function of (config, seed,
// manifest). max_steps > 0 truncates the run (smoke tests).
Checkpoint train(const TrainConfig& config, const DatasetManifest& train_split,
                 const ParameterSet& pretrained, uint64_t seed, int max_steps = 0);

// One evaluation of the full joint objective on a fixed batch; the same
// code path the training step optimizes (gradient-check entry point).
struct BatchObjective {
    Tensor total;
    LossBreakdown breakdown;
};
BatchObjective training_objective(const Model& model, const std::vector<FrameItem>& items,
                                  const LossConfig& config);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Decoded, background-suppressed, deduplicated detections of one frame.
std::vector<Detection> predict_frame(const Model& model, const SceneRecord& record, int frame,
                                     const std::array<uint8_t, kNumModalities>& mask);

inline constexpr std::array<double, 4> kMatchThresholds = {0.25, 0.5, 1.0, 2.0};
inline constexpr double kTpErrorThreshold = 1.0;
inline constexpr double kDedupRadius = 1.0;

MetricsReport eval_standard(const Checkpoint& ckpt, const DatasetManifest& test);

struct DropoutEvalResult {
    MetricsReport summary;  // per_subset carries the per-subset mAPs
    std::map<std::string, MetricsReport> reports;
};
// Default subsets: the five singletons, lidar+camera, and all modalities.
// Subset masks override stored weather availability so every subset is
// scored on identical frames.
DropoutEvalResult eval_dropout(const Checkpoint& ckpt, const DatasetManifest& test,
                               std::vector<std::vector<Modality>> subsets = {});

struct WeatherRow {
    std::string condition;
    double ap = 0.0;
    int frames = 0;
};
struct WeatherEvalResult {
    MetricsReport summary;  // per_condition carries the per-bucket APs
    std::vector<WeatherRow> rows;  // four conditions plus "total"
};
inline constexpr double kWeatherApThreshold = 0.5;
WeatherEvalResult eval_weather(const Checkpoint& ckpt, const DatasetManifest& test);

// Nearest-prototype accuracy on the held-out (modality, class) pairs.
double eval_zero_shot(const Checkpoint& ckpt, const DatasetManifest& train,
                      const DatasetManifest& test);

struct SweepRow {
    int rank = 0;
    double trainable_fraction = 0.0;
    double composite = 0.0;
};
std::vector<SweepRow> sweep_ranks(const TrainConfig& base, const std::vector<int>& ranks,
                                  const DatasetManifest& train_split,
                                  const DatasetManifest& test_split, const ParameterSet& pretrained,
                                  uint64_t seed);

// CSV emission (config hash and seed embedded in the comment header)
std::string curve_to_csv(const Checkpoint& ckpt);
std::string weather_to_csv(const std::vector<WeatherRow>& rows, const std::string& config_hash,
                           uint64_t seed);
std::string sweep_to_csv(const std::vector<SweepRow>& rows, const std::string& config_hash,
                         uint64_t seed);

}  // namespace peftdml
