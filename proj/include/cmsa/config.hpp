#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmsa/cmsa.hpp"

namespace cmsa {

inline constexpr int kSchemaVersion = 1;

struct StageConfig {
    int channels = 0;
    int blocks = 0;
    /// Windows are in this stage's own coordinates.
    CmsaConfig attention;

    friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct ModelConfig {
    std::string variant = "custom";
    int image_height = 32;
    int image_width = 32;
    int in_channels = 3;
    int stem_channels = 0;
    /// Total stem downsampling: 1, 2 or 4.
    int stem_stride = 1;
    std::vector<StageConfig> stages;
    int ffn_ratio = 4;
    int classes = 100;

    /// Spatial size of stage i (0-based).
    std::pair<int, int> stage_size(int i) const;
    /// Throws ConfigError naming the offending field.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ScheduleKind { cosine, step };

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::cosine;
    double lr_max = 2.5e-3;
    double lr_min = 1e-5;
    int warmup_epochs = 5;
    /// Step kind only: epochs at which the rate is multiplied by `decay`.
    std::vector<int> milestones;
    double decay = 0.1;

    friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct TrainConfig {
    std::string dataset = "cifar100";
    int epochs = 20;
    int batch_size = 128;
    /// Samples per forward pass; gradients are accumulated up to batch_size.
    int micro_batch = 16;
    int eval_batch = 16;
    double weight_decay = 5e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double label_smoothing = 0.1;
    ScheduleConfig schedule;
    int crop_padding = 4;
    bool horizontal_flip = true;
    bool mixup = false;
    bool random_erasing = false;
    std::vector<double> mean{0.4914, 0.4822, 0.4465};
    std::vector<double> std{0.2470, 0.2435, 0.2616};
    /// Use only the first N training records (0 = all).
    int subset = 0;
    /// Stop once train accuracy exceeds this value (0 = never).
    double stop_train_accuracy = 0.0;
    int checkpoint_every = 1;

    void validate() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct RunConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;

    void validate() const;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Built-in variants S, B, L at the given input size. Windows are stored at a
/// 32x24 first-stage reference and scaled to the actual stage sizes.
ModelConfig variant_config(std::string_view name, int image_height = 32, int image_width = 32, int classes = 100,
                           int stem_stride = 1);
RunConfig default_run_config(std::string_view variant = "S");

/// Applies one ablation row to every stage.
void apply_ablation(ModelConfig& config, const AblationFlags& flags);

std::string to_json(const RunConfig& config);
/// Throws ConfigError("<field path>: <problem>") on malformed input.
RunConfig run_config_from_json(std::string_view text);
RunConfig load_run_config(const std::string& path);

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view text);

/// FNV-1a 64 over the canonical JSON of the model configuration.
std::uint64_t config_digest(const ModelConfig& config);
/// FNV-1a 64; pass a previous result as `h` to continue a running hash.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace cmsa
