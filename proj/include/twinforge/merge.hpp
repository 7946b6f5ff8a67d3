#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twinforge/checkpoint.hpp"
#include "twinforge/compress.hpp"

namespace twinforge {

enum class MergeMethod { kAverage, kTaskArithmetic, kTies, kTwin };

MergeMethod merge_method_from_string(const std::string& s);
std::string to_string(MergeMethod m);

struct MergeRecipe {
    MergeMethod method = MergeMethod::kTaskArithmetic;
    std::vector<double> gammas;             // per-task coefficients
    double ties_density = 0.2;
    double ties_lambda = 1.0;
    std::optional<double> dare_drop_rate;   // "w/ DARE" variants
    uint64_t dare_seed = 0;
    int64_t twin_rank = 0;                  // 0 = full rank
};

// Per-tensor arithmetic mean. Frozen tensors must be bit-identical across
// experts and are copied through unchanged.
Checkpoint weight_average(const std::vector<Checkpoint>& experts);

// base + sum_t gammas[t] * (experts[t] - base).
Checkpoint task_arithmetic(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                           const std::vector<double>& gammas);

// Trim each task delta to the top-density magnitudes, elect the per-coordinate
// sign from the trimmed sum, average the sign-matching trimmed values, and add
// lambda times the result to the base. An exactly zero trimmed sum yields 0.
Checkpoint ties_merge(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                      double density, double lambda);

struct TwinPreprocess {
    Checkpoint shared;
    std::vector<TwinVector> twins;
};

// Shared expert via task arithmetic, then rank-r compression of each
// expert-minus-shared residual. Runs once per task set.
TwinPreprocess twin_preprocess(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                               const std::vector<double>& gammas, int64_t rank);

// shared + sum_t w[t] * decompress(twins[t]). Tensors absent from the twins
// (frozen ones) are passed through from the shared expert bit-exactly.
Checkpoint dynamic_merge(const Checkpoint& shared, const std::vector<TwinVector>& twins,
                         const std::vector<double>& weights);

// Read-only cache of decompressed twin deltas for inference loops.
class TwinCache {
public:
    explicit TwinCache(const std::vector<TwinVector>& twins);
    const std::vector<Delta>& deltas() const { return deltas_; }
    size_t task_count() const { return deltas_.size(); }

private:
    std::vector<Delta> deltas_;
};

Checkpoint dynamic_merge(const Checkpoint& shared, const TwinCache& cache,
                         const std::vector<double>& weights);

// Dispatches average / task-arithmetic / ties, applying the optional DARE
// drop to each task delta first. Twin requires the two-stage path above.
Checkpoint apply_recipe(const MergeRecipe& recipe, const Checkpoint& base,
                        const std::vector<Checkpoint>& experts);

}  // namespace twinforge
