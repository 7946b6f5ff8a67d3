#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twinforge/checkpoint.hpp"
#include "twinforge/linalg.hpp"

namespace twinforge {

struct Dataset {
    Tensor x;            // n x d
    std::vector<int> y;  // class labels

    int64_t size() const { return static_cast<int64_t>(y.size()); }
    std::span<const float> row(int64_t i) const;
};

struct TaskData {
    Dataset train;
    Dataset val;
    Dataset test;
};

struct SuiteConfig {
    int64_t task_count = 4;
    int64_t feature_dim = 32;
    int64_t classes = 4;
    int64_t n_per_task = 2000;
    double shared_strength = 0.5;
    uint64_t seed = 0;
    // The global layout is a class-mean constellation centered layout_center
    // away from the origin with per-class Gaussian spread layout_spread, so
    // task rotations displace whole constellations while class separation
    // stays governed by the spread.
    double layout_center = 6.0;
    double layout_spread = 0.4;
    double train_frac = 0.35;
    double val_frac = 0.50;
    std::vector<double> alphas;  // empty = uniform
};

// Synthetic multi-task suite. Each task's class means interpolate between a
// global cluster layout and a task-specific rotation of it; samples add
// Gaussian noise with sigma 0.5. Fully determined by the seed.
class TaskSuite {
public:
    std::vector<TaskData> tasks;
    std::vector<double> alphas;
    int64_t feature_dim = 0;
    int64_t classes = 0;
    double shared_strength = 0.0;
    double layout_center = 0.0;
    double layout_spread = 0.0;
    uint64_t seed = 0;

    int64_t task_count() const { return static_cast<int64_t>(tasks.size()); }

    static TaskSuite generate(const SuiteConfig& cfg);
    void save(const std::filesystem::path& path) const;
    static TaskSuite load(const std::filesystem::path& path);
};

struct ModelConfig {
    int64_t input_dim = 32;
    int64_t hidden_dim = 64;
    int64_t classes = 4;
};

struct AdapterPair {
    Tensor a;  // rho x d_in
    Tensor b;  // d_out x rho
};

struct TrainConfig {
    int epochs = 30;
    double lr = 0.05;
    int batch_size = 64;
    double momentum = 0.9;
    uint64_t seed = 0;
    bool use_adapter = false;
    int64_t adapter_rank = 4;
    std::vector<int> adapter_layers = {0, 1, 2};
};

// Two-hidden-layer tanh MLP. Adapted layers use W + B*A as their effective
// weight; base parameters stay untouched while an adapter trains.
class ToyModel {
public:
    ToyModel() = default;

    static ToyModel init(const ModelConfig& cfg, uint64_t seed);
    static ToyModel from_checkpoint(const Checkpoint& c);
    Checkpoint to_checkpoint() const;  // base parameters only

    int64_t input_dim() const;
    int64_t hidden_dim() const;
    int64_t classes() const;
    int layer_count() const { return 3; }

    bool has_adapter() const;
    void attach_adapter(int64_t rank, const std::vector<int>& layers, uint64_t seed);
    const std::optional<AdapterPair>& adapter(int layer) const;
    // Dense checkpoint with B*A folded into each adapted weight.
    Checkpoint merge_adapter() const;

    std::vector<float> logits(std::span<const float> x) const;
    // Penultimate-layer activation; dimension equals the hidden width.
    std::vector<float> embed(std::span<const float> x) const;
    int predict(std::span<const float> x) const;

    double score(const Dataset& data) const;

    // Effective weight of a layer (W + B*A when adapted).
    Tensor effective_weight(int layer) const;

private:
    struct Layer {
        Tensor w;
        Tensor b;
        std::optional<AdapterPair> adapter;
    };
    std::vector<Layer> layers_;

    friend class ToyTrainer;
};

// Fine-tunes a copy of `base` on `data`. With cfg.use_adapter only the
// adapter factors move and the base weights stay bit-identical.
ToyModel train_expert(const ToyModel& base, const Dataset& data, const TrainConfig& cfg,
                      std::vector<double>* epoch_losses = nullptr);

double score(const ToyModel& m, const Dataset& data);

}  // namespace twinforge
