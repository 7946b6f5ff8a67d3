#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "twinforge/checkpoint.hpp"
#include "twinforge/linalg.hpp"

namespace twinforge {

// Softmax merging weights for one input.
struct RoutingDecision {
    std::vector<float> weights;  // softmax(logits); non-negative, sums to 1
    std::vector<float> logits;

    int argmax() const;
};

// Three-layer feed-forward fuser with batch normalization after the first
// two affine maps and Leaky ReLU activations. The final layer starts at
// zero so an untrained router emits uniform weights.
class Router {
public:
    Router() = default;
    Router(int64_t embed_dim, int64_t hidden_dim, int64_t task_count, uint64_t seed);

    // Eval mode: normalizes with running statistics; independent of batch
    // composition and safe to call concurrently.
    RoutingDecision route(std::span<const float> embedding) const;

    int64_t embed_dim() const { return w0_.cols(); }
    int64_t hidden_dim() const { return w0_.rows(); }
    int64_t task_count() const { return w2_.rows(); }
    float leaky_slope() const { return leaky_slope_; }
    int64_t param_count() const;

    Checkpoint to_checkpoint() const;
    static Router from_checkpoint(const Checkpoint& c);

    struct TrainConfig {
        int epochs = 10;
        double lr = 5e-4;
        int batch_size = 64;
        double momentum = 0.9;
        double bn_momentum = 0.1;
        int64_t hidden_dim = 256;
        uint64_t seed = 0;
        int max_items_per_task = 1000;
    };

    friend Router train_router(const std::vector<std::vector<float>>& embeddings,
                               const std::vector<int>& task_ids, int64_t task_count,
                               const TrainConfig& cfg, std::vector<double>* epoch_losses);

private:
    struct BatchNorm {
        Tensor running_mean;
        Tensor running_var;
    };

    Tensor w0_, b0_, w1_, b1_, w2_, b2_;
    BatchNorm bn0_, bn1_;
    float leaky_slope_ = 0.01f;

    friend class RouterTrainer;
};

// Supervised task-id training on (embedding, task_id) pairs with minibatch
// gradient descent. At most cfg.max_items_per_task items per task; at least
// two tasks, none empty. Deterministic for a fixed seed.
Router train_router(const std::vector<std::vector<float>>& embeddings,
                    const std::vector<int>& task_ids, int64_t task_count,
                    const Router::TrainConfig& cfg = {},
                    std::vector<double>* epoch_losses = nullptr);

struct GroupedWeights {
    std::vector<int> group_of;                      // per-item group id
    std::vector<std::vector<float>> group_weights;  // per-group merged weights
};

// Bins decisions by argmax logit, k-means clusters logits inside each bin
// (at most group_count clusters per bin), and averages member weights per
// group (renormalized). With group_count >= batch size every item becomes
// its own group with its weights passed through unchanged.
GroupedWeights group_weights(const std::vector<RoutingDecision>& decisions,
                             int group_count = 20, uint64_t seed = 0);

}  // namespace twinforge
