#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinforge/checkpoint.hpp"
#include "twinforge/compress.hpp"
#include "twinforge/merge.hpp"
#include "twinforge/router.hpp"
#include "twinforge/toyzoo.hpp"

namespace twinforge {

// (1/T) * sum_t scores[t] / ft_scores[t], scaled to 100.
double normalized_score(const std::vector<double>& scores, const std::vector<double>& ft_scores);

struct StorageAccount {
    int64_t task_count = 0;
    int64_t p = 0;    // total parameters
    int64_t p_a = 0;  // activated (mergeable) parameters
    int64_t p_f = 0;  // frozen parameters
    int64_t p_r = 0;  // router parameters
    double k = 1.0;   // compression ratio
    int64_t bytes_finetuned = 0;  // 2 (T p_a + p_f)
    int64_t bytes_single = 0;     // 2 p
    int64_t bytes_twin = 0;       // 2 T ceil(k p_a) + 2 p + p_r

    nlohmann::json to_json() const;
};

StorageAccount storage_report(int64_t task_count, int64_t p, int64_t p_a, int64_t p_f,
                              int64_t p_r, double k);

enum class InferenceMode { kPerSample, kGrouped };

InferenceMode inference_mode_from_string(const std::string& s);
std::string to_string(InferenceMode m);

struct InferenceConfig {
    InferenceMode mode = InferenceMode::kPerSample;
    int group_count = 20;
    uint64_t seed = 0;
};

struct ExperimentReport {
    std::vector<double> per_task_scores;
    std::vector<double> ft_scores;
    double normalized = 0.0;
    int64_t merged_model_count = 0;
    double wall_time_seconds = 0.0;  // reported on stderr, never serialized
    StorageAccount storage;
    nlohmann::json config_echo;
    // Per-item predictions in suite order (task-major); lets tests compare
    // grouped and per-sample runs exactly.
    std::vector<int> predictions;

    nlohmann::json to_json() const;
};

// The inference loop: embed each test input through the shared expert,
// route, dynamically merge, and classify. Grouped mode batches router
// decisions through group_weights and merges once per group.
ExperimentReport run_inference(const Checkpoint& shared, const std::vector<TwinVector>& twins,
                               const Router& router, const TaskSuite& suite,
                               const std::vector<double>& ft_scores, const InferenceConfig& cfg);

// ---------------------------------------------------------------------------
// Experiment pipeline: suite -> pretrained base -> per-task experts.
// ---------------------------------------------------------------------------

struct PipelineConfig {
    SuiteConfig suite;
    int base_epochs = 30;      // pretraining on the pure global layout
    int base_mix_epochs = 10;  // light pretraining on the task mixture
    TrainConfig expert_train;
    Router::TrainConfig router_train;
    int64_t hidden_dim = 64;
    uint64_t seed = 0;
    bool train_experts = true;  // experiments that train their own experts skip this
};

struct Pipeline {
    TaskSuite suite;
    ToyModel base;
    std::vector<ToyModel> experts;
    std::vector<double> ft_scores;      // expert own-task test accuracy
    std::vector<double> ft_val_scores;  // expert own-task validation accuracy
};

// The base model is trained on data drawn from the pure global cluster
// layout (a one-task suite at shared_strength 1 with the same seed), so it
// carries the knowledge common to all tasks but none of the rotations.
Pipeline build_pipeline(const PipelineConfig& cfg);

// Dense expert checkpoints (adapters folded when present).
std::vector<Checkpoint> expert_checkpoints(const Pipeline& pipe);

// Test-split accuracy of a merged checkpoint on every task.
std::vector<double> test_scores(const Checkpoint& merged, const TaskSuite& suite);

// Validation grid search over {0.1, ..., 1.0} for a single shared gamma.
double search_gamma(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                    const Pipeline& pipe);
double search_ties_lambda(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                          const Pipeline& pipe, double density);

// Embeddings + task ids of a suite split, capped per task.
struct RouterData {
    std::vector<std::vector<float>> embeddings;
    std::vector<int> task_ids;
};
enum class Split { kTrain, kVal, kTest };
RouterData collect_router_data(const ToyModel& shared, const TaskSuite& suite, Split split,
                               int max_items_per_task = 1000);

// Routing accuracy of argmax task prediction over a split.
double routing_accuracy(const Router& router, const ToyModel& shared, const TaskSuite& suite,
                        Split split);

// Full twin pipeline on an existing Pipeline: searched-gamma shared expert,
// rank-r twins (0 = full), router trained on validation embeddings.
struct TwinSetup {
    Checkpoint shared;
    std::vector<TwinVector> twins;
    Router router;
    double gamma = 0.0;
};
TwinSetup build_twin_setup(const Pipeline& pipe, int64_t rank, const Router::TrainConfig& rt);

// ---------------------------------------------------------------------------
// Sweeps. Each emits a deterministic CSV (header row; one row per
// (config, method, task, score); a "normalized" summary row per config cell)
// plus a JSON summary.
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row) { rows.push_back(std::move(row)); }
    std::string to_string() const;
};

struct SweepResult {
    CsvTable csv;
    nlohmann::json summary;
};

enum class SparsifyMethod { kSvd, kMagnitude, kBernoulli };
SparsifyMethod sparsify_method_from_string(const std::string& s);
std::string to_string(SparsifyMethod m);

// Rank-r twin at a given sparsity rate: per-tensor rank for SVD, density
// (1 - rate) for magnitude, drop rate for Bernoulli.
TwinVector sparsify_delta(const Delta& d, double rate, SparsifyMethod method, uint64_t seed);

SweepResult sweep_sparsity(const PipelineConfig& cfg, const std::vector<double>& rates,
                           const std::vector<uint64_t>& seeds, int jobs = 1);
SweepResult sweep_tasks(const PipelineConfig& cfg, const std::vector<int64_t>& task_counts,
                        const std::vector<uint64_t>& seeds, int jobs = 1);
SweepResult sweep_epochs(const PipelineConfig& cfg, const std::vector<int>& epoch_values,
                         const std::vector<uint64_t>& seeds, int jobs = 1);
SweepResult sweep_single_task_sparsity(const PipelineConfig& cfg, const std::vector<double>& rates,
                                       const std::vector<uint64_t>& seeds, int jobs = 1);
SweepResult coeff_grid(const PipelineConfig& cfg, double gamma_min, double gamma_max, double step,
                       const std::vector<uint64_t>& seeds, int jobs = 1);
SweepResult nonoverlap_experiment(const PipelineConfig& cfg, const std::vector<uint64_t>& seeds,
                                  int jobs = 1);

// Writes <name>.csv and <name>.json under dir; creates dir if needed.
void write_sweep(const SweepResult& result, const std::filesystem::path& dir,
                 const std::string& name);

// Runs the module invariant suites; prints one line per check.
bool selftest(std::ostream& out);

std::string format_score(double v);  // fixed 6-decimal formatting used in CSVs

}  // namespace twinforge
