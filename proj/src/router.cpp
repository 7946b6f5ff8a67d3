#include "twinforge/router.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "twinforge/errors.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

namespace {

constexpr double kBnEps = 1e-5;

std::vector<float> softmax(const std::vector<float>& logits) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (float v : logits) maxv = std::max(maxv, static_cast<double>(v));
    std::vector<double> e(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(static_cast<double>(logits[i]) - maxv);
        sum += e[i];
    }
    std::vector<float> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / sum);
    return out;
}

Tensor gaussian_matrix(int64_t rows, int64_t cols, double stddev, Rng& rng) {
    std::vector<float> data(static_cast<size_t>(rows * cols));
    for (auto& v : data) v = static_cast<float>(rng.gaussian() * stddev);
    return Tensor({rows, cols}, std::move(data));
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd out(t.rows(), t.rank() == 2 ? t.cols() : 1);
    if (t.rank() == 2) {
        for (int64_t i = 0; i < t.rows(); ++i)
            for (int64_t j = 0; j < t.cols(); ++j) out(i, j) = t.at(i, j);
    } else {
        for (int64_t i = 0; i < t.rows(); ++i) out(i, 0) = t.at(i);
    }
    return out;
}

void from_eigen(const Eigen::MatrixXd& m, Tensor& t) {
    if (t.rank() == 2) {
        for (int64_t i = 0; i < t.rows(); ++i)
            for (int64_t j = 0; j < t.cols(); ++j) t.at(i, j) = static_cast<float>(m(i, j));
    } else {
        for (int64_t i = 0; i < t.rows(); ++i) t.at(i) = static_cast<float>(m(i, 0));
    }
}

}  // namespace

int RoutingDecision::argmax() const {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = static_cast<int>(i);
    }
    return best;
}

Router::Router(int64_t embed_dim, int64_t hidden_dim, int64_t task_count, uint64_t seed) {
    if (embed_dim < 1 || hidden_dim < 1 || task_count < 1) {
        throw ArgumentError("router dimensions must be positive");
    }
    Rng rng = Rng(seed).fork("router-init");
    w0_ = gaussian_matrix(hidden_dim, embed_dim, 1.0 / std::sqrt(static_cast<double>(embed_dim)), rng);
    b0_ = Tensor::zeros({hidden_dim});
    w1_ = gaussian_matrix(hidden_dim, hidden_dim, 1.0 / std::sqrt(static_cast<double>(hidden_dim)), rng);
    b1_ = Tensor::zeros({hidden_dim});
    // Zero final layer: a fresh router emits uniform 1/T weights.
    w2_ = Tensor::zeros({task_count, hidden_dim});
    b2_ = Tensor::zeros({task_count});
    bn0_.running_mean = Tensor::zeros({hidden_dim});
    bn0_.running_var = Tensor({hidden_dim}, std::vector<float>(static_cast<size_t>(hidden_dim), 1.0f));
    bn1_.running_mean = Tensor::zeros({hidden_dim});
    bn1_.running_var = Tensor({hidden_dim}, std::vector<float>(static_cast<size_t>(hidden_dim), 1.0f));
}

RoutingDecision Router::route(std::span<const float> embedding) const {
    if (static_cast<int64_t>(embedding.size()) != embed_dim()) {
        throw ArgumentError("embedding dimension " + std::to_string(embedding.size()) +
                            " does not match router input " + std::to_string(embed_dim()));
    }
    const int64_t h = hidden_dim();
    const int64_t t_count = task_count();

    std::vector<float> a0(static_cast<size_t>(h));
    for (int64_t i = 0; i < h; ++i) {
        double z = b0_.at(i);
        for (int64_t j = 0; j < embed_dim(); ++j) {
            z += static_cast<double>(w0_.at(i, j)) * static_cast<double>(embedding[j]);
        }
        double xhat = (z - bn0_.running_mean.at(i)) /
                      std::sqrt(static_cast<double>(bn0_.running_var.at(i)) + kBnEps);
        a0[static_cast<size_t>(i)] = static_cast<float>(xhat > 0.0 ? xhat : leaky_slope_ * xhat);
    }
    std::vector<float> a1(static_cast<size_t>(h));
    for (int64_t i = 0; i < h; ++i) {
        double z = b1_.at(i);
        for (int64_t j = 0; j < h; ++j) {
            z += static_cast<double>(w1_.at(i, j)) * static_cast<double>(a0[static_cast<size_t>(j)]);
        }
        double xhat = (z - bn1_.running_mean.at(i)) /
                      std::sqrt(static_cast<double>(bn1_.running_var.at(i)) + kBnEps);
        a1[static_cast<size_t>(i)] = static_cast<float>(xhat > 0.0 ? xhat : leaky_slope_ * xhat);
    }
    RoutingDecision out;
    out.logits.resize(static_cast<size_t>(t_count));
    for (int64_t i = 0; i < t_count; ++i) {
        double z = b2_.at(i);
        for (int64_t j = 0; j < h; ++j) {
            z += static_cast<double>(w2_.at(i, j)) * static_cast<double>(a1[static_cast<size_t>(j)]);
        }
        out.logits[static_cast<size_t>(i)] = static_cast<float>(z);
    }
    out.weights = softmax(out.logits);
    return out;
}

int64_t Router::param_count() const {
    return w0_.size() + b0_.size() + w1_.size() + b1_.size() + w2_.size() + b2_.size() +
           bn0_.running_mean.size() + bn0_.running_var.size() + bn1_.running_mean.size() +
           bn1_.running_var.size();
}

Checkpoint Router::to_checkpoint() const {
    Checkpoint::ParamMap params;
    params["layer0.w"] = w0_;
    params["layer0.b"] = b0_;
    params["layer1.w"] = w1_;
    params["layer1.b"] = b1_;
    params["layer2.w"] = w2_;
    params["layer2.b"] = b2_;
    params["bn0.mean"] = bn0_.running_mean;
    params["bn0.var"] = bn0_.running_var;
    params["bn1.mean"] = bn1_.running_mean;
    params["bn1.var"] = bn1_.running_var;
    Checkpoint::MetaMap meta;
    meta["kind"] = "router";
    meta["tasks"] = std::to_string(task_count());
    meta["leaky_slope"] = std::to_string(leaky_slope_);
    return Checkpoint(std::move(params), std::move(meta));
}

Router Router::from_checkpoint(const Checkpoint& c) {
    auto kind = c.meta().find("kind");
    if (kind == c.meta().end() || kind->second != "router") {
        throw FormatError("checkpoint is not a router (missing kind=router)");
    }
    Router r;
    r.w0_ = c.at("layer0.w");
    r.b0_ = c.at("layer0.b");
    r.w1_ = c.at("layer1.w");
    r.b1_ = c.at("layer1.b");
    r.w2_ = c.at("layer2.w");
    r.b2_ = c.at("layer2.b");
    r.bn0_.running_mean = c.at("bn0.mean");
    r.bn0_.running_var = c.at("bn0.var");
    r.bn1_.running_mean = c.at("bn1.mean");
    r.bn1_.running_var = c.at("bn1.var");
    auto slope = c.meta().find("leaky_slope");
    if (slope != c.meta().end()) r.leaky_slope_ = std::stof(slope->second);
    for (int64_t i = 0; i < r.bn0_.running_var.size(); ++i) {
        if (!(r.bn0_.running_var.at(i) > 0.0f) || !(r.bn1_.running_var.at(i) > 0.0f)) {
            throw FormatError("router running variances must be positive");
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

class RouterTrainer {
public:
    RouterTrainer(Router& r, const Router::TrainConfig& cfg) : r_(r), cfg_(cfg) {}

    void fit(const std::vector<std::vector<float>>& embeddings, const std::vector<int>& task_ids,
             std::vector<double>* epoch_losses) {
        const int64_t n = static_cast<int64_t>(embeddings.size());
        const int64_t e_dim = r_.embed_dim();
        const int64_t h = r_.hidden_dim();
        const int64_t t_count = r_.task_count();

        Eigen::MatrixXd all_x(n, e_dim);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < e_dim; ++j) all_x(i, j) = embeddings[static_cast<size_t>(i)][static_cast<size_t>(j)];

        Eigen::MatrixXd vel_w0 = Eigen::MatrixXd::Zero(h, e_dim);
        Eigen::VectorXd vel_b0 = Eigen::VectorXd::Zero(h);
        Eigen::MatrixXd vel_w1 = Eigen::MatrixXd::Zero(h, h);
        Eigen::VectorXd vel_b1 = Eigen::VectorXd::Zero(h);
        Eigen::MatrixXd vel_w2 = Eigen::MatrixXd::Zero(t_count, h);
        Eigen::VectorXd vel_b2 = Eigen::VectorXd::Zero(t_count);

        Rng root(cfg_.seed);
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);

        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            Rng shuffler = root.fork("epoch" + std::to_string(epoch));
            shuffler.shuffle(order);
            double loss_sum = 0.0;

            for (int64_t start = 0; start < n; start += cfg_.batch_size) {
                const int64_t bsz = std::min<int64_t>(cfg_.batch_size, n - start);

                Eigen::MatrixXd x(bsz, e_dim);
                std::vector<int> yb(static_cast<size_t>(bsz));
                for (int64_t b = 0; b < bsz; ++b) {
                    x.row(b) = all_x.row(order[static_cast<size_t>(start + b)]);
                    yb[static_cast<size_t>(b)] = task_ids[static_cast<size_t>(order[static_cast<size_t>(start + b)])];
                }

                Block l0 = forward_block(x, r_.w0_, r_.b0_, r_.bn0_);
                Block l1 = forward_block(l0.act, r_.w1_, r_.b1_, r_.bn1_);

                Eigen::MatrixXd w2 = to_eigen(r_.w2_);
                Eigen::MatrixXd logits = l1.act * w2.transpose();
                for (int64_t i = 0; i < t_count; ++i) logits.col(i).array() += r_.b2_.at(i);

                // Softmax cross-entropy, gradient averaged over the batch.
                Eigen::MatrixXd dlogits(bsz, t_count);
                for (int64_t b = 0; b < bsz; ++b) {
                    double maxv = logits.row(b).maxCoeff();
                    Eigen::ArrayXd e = (logits.row(b).array() - maxv).exp();
                    double sum = e.sum();
                    loss_sum -= logits(b, yb[static_cast<size_t>(b)]) - maxv - std::log(sum);
                    for (int64_t i = 0; i < t_count; ++i) {
                        double target = (i == yb[static_cast<size_t>(b)]) ? 1.0 : 0.0;
                        dlogits(b, i) = (e(i) / sum - target) / static_cast<double>(bsz);
                    }
                }
                if (!std::isfinite(loss_sum)) throw TrainingError("router loss became non-finite");

                Eigen::MatrixXd dw2 = dlogits.transpose() * l1.act;
                Eigen::VectorXd db2 = dlogits.colwise().sum();
                Eigen::MatrixXd dact1 = dlogits * w2;

                Eigen::MatrixXd dx1 = backward_block(l1, dact1, l0.act, r_.w1_);
                Eigen::MatrixXd dx0 = backward_block(l0, dx1, x, r_.w0_);
                (void)dx0;

                step(r_.w2_, vel_w2, dw2);
                step_vec(r_.b2_, vel_b2, db2);
                step(r_.w1_, vel_w1, l1.dw);
                step_vec(r_.b1_, vel_b1, l1.db);
                step(r_.w0_, vel_w0, l0.dw);
                step_vec(r_.b0_, vel_b0, l0.db);
            }
            if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(n));
        }
    }

private:
    struct Block {
        Eigen::MatrixXd xhat, act;       // B x out
        Eigen::VectorXd inv_std;         // out
        Eigen::MatrixXd dw;              // filled by backward_block
        Eigen::VectorXd db;
    };

    Block forward_block(const Eigen::MatrixXd& input, const Tensor& w, const Tensor& b,
                        Router::BatchNorm& bn) {
        const int64_t bsz = input.rows();
        const int64_t out_dim = w.rows();
        Eigen::MatrixXd wm = to_eigen(w);
        Eigen::MatrixXd z = input * wm.transpose();
        for (int64_t i = 0; i < out_dim; ++i) z.col(i).array() += b.at(i);

        Block blk;
        blk.xhat.resize(bsz, out_dim);
        blk.inv_std.resize(out_dim);
        for (int64_t i = 0; i < out_dim; ++i) {
            const double mu = z.col(i).mean();
            const double var = (z.col(i).array() - mu).square().sum() / static_cast<double>(bsz);
            blk.inv_std(i) = 1.0 / std::sqrt(var + kBnEps);
            blk.xhat.col(i) = (z.col(i).array() - mu) * blk.inv_std(i);

            // Running statistics update (training mode only).
            bn.running_mean.at(i) = static_cast<float>(
                (1.0 - cfg_.bn_momentum) * bn.running_mean.at(i) + cfg_.bn_momentum * mu);
            bn.running_var.at(i) = static_cast<float>(
                (1.0 - cfg_.bn_momentum) * bn.running_var.at(i) + cfg_.bn_momentum * var);
        }
        blk.act = blk.xhat.unaryExpr([slope = static_cast<double>(r_.leaky_slope_)](double v) {
            return v > 0.0 ? v : slope * v;
        });
        return blk;
    }

    // Returns the gradient w.r.t. the block input; fills blk.dw / blk.db.
    Eigen::MatrixXd backward_block(Block& blk, const Eigen::MatrixXd& dact,
                                   const Eigen::MatrixXd& input, const Tensor& w) {
        const int64_t bsz = dact.rows();
        const int64_t out_dim = dact.cols();
        Eigen::MatrixXd dxhat(bsz, out_dim);
        for (int64_t i = 0; i < out_dim; ++i) {
            for (int64_t b = 0; b < bsz; ++b) {
                double slope = blk.xhat(b, i) > 0.0 ? 1.0 : r_.leaky_slope_;
                dxhat(b, i) = dact(b, i) * slope;
            }
        }
        Eigen::MatrixXd dz(bsz, out_dim);
        const double inv_b = 1.0 / static_cast<double>(bsz);
        for (int64_t i = 0; i < out_dim; ++i) {
            const double sum_dxhat = dxhat.col(i).sum();
            const double sum_dxhat_xhat = dxhat.col(i).dot(blk.xhat.col(i));
            dz.col(i) = blk.inv_std(i) *
                        (dxhat.col(i).array() - inv_b * sum_dxhat -
                         blk.xhat.col(i).array() * (inv_b * sum_dxhat_xhat));
        }
        blk.dw = dz.transpose() * input;
        blk.db = dz.colwise().sum();
        return dz * to_eigen(w);
    }

    void step(Tensor& param, Eigen::MatrixXd& vel, const Eigen::MatrixXd& grad) {
        vel = cfg_.momentum * vel + grad;
        for (int64_t i = 0; i < param.rows(); ++i) {
            for (int64_t j = 0; j < param.cols(); ++j) {
                param.at(i, j) = static_cast<float>(param.at(i, j) - cfg_.lr * vel(i, j));
            }
        }
    }
    void step_vec(Tensor& param, Eigen::VectorXd& vel, const Eigen::VectorXd& grad) {
        vel = cfg_.momentum * vel + grad;
        for (int64_t i = 0; i < param.size(); ++i) {
            param.at(i) = static_cast<float>(param.at(i) - cfg_.lr * vel(i));
        }
    }

    Router& r_;
    const Router::TrainConfig& cfg_;
};

Router train_router(const std::vector<std::vector<float>>& embeddings,
                    const std::vector<int>& task_ids, int64_t task_count,
                    const Router::TrainConfig& cfg, std::vector<double>* epoch_losses) {
    if (embeddings.size() != task_ids.size()) {
        throw ArgumentError("train_router: embeddings and task ids differ in length");
    }
    if (embeddings.empty()) throw DataError("train_router: no training data");
    if (task_count < 2) throw ArgumentError("train_router: need at least two tasks");

    std::vector<int64_t> per_task(static_cast<size_t>(task_count), 0);
    for (int id : task_ids) {
        if (id < 0 || id >= task_count) throw DataError("train_router: task id out of range");
        per_task[static_cast<size_t>(id)]++;
    }
    for (int64_t t = 0; t < task_count; ++t) {
        if (per_task[static_cast<size_t>(t)] == 0) {
            throw DataError("train_router: task " + std::to_string(t) + " has no items");
        }
        if (per_task[static_cast<size_t>(t)] > cfg.max_items_per_task) {
            throw ArgumentError("train_router: task " + std::to_string(t) + " exceeds " +
                                std::to_string(cfg.max_items_per_task) + " items");
        }
    }
    const int64_t e_dim = static_cast<int64_t>(embeddings[0].size());
    for (const auto& e : embeddings) {
        if (static_cast<int64_t>(e.size()) != e_dim) {
            throw ArgumentError("train_router: inconsistent embedding dimensions");
        }
    }

    Router r(e_dim, cfg.hidden_dim, task_count, cfg.seed);
    RouterTrainer trainer(r, cfg);
    trainer.fit(embeddings, task_ids, epoch_losses);
    return r;
}

// ---------------------------------------------------------------------------
// Group-wise batching
// ---------------------------------------------------------------------------

namespace {

double sq_dist(const std::vector<float>& a, const std::vector<float>& b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double x = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        d += x * x;
    }
    return d;
}

// Lloyd's algorithm, 10 iterations, seeded farthest-point initialization.
std::vector<int> kmeans_assign(const std::vector<std::vector<float>>& pts, int k, Rng& rng) {
    const int n = static_cast<int>(pts.size());
    std::vector<std::vector<float>> centers;
    centers.reserve(static_cast<size_t>(k));
    centers.push_back(pts[static_cast<size_t>(rng.below(static_cast<uint64_t>(n)))]);
    while (static_cast<int>(centers.size()) < k) {
        int far_idx = 0;
        double far_dist = -1.0;
        for (int i = 0; i < n; ++i) {
            double d = std::numeric_limits<double>::infinity();
            for (const auto& c : centers) d = std::min(d, sq_dist(pts[static_cast<size_t>(i)], c));
            if (d > far_dist) {
                far_dist = d;
                far_idx = i;
            }
        }
        centers.push_back(pts[static_cast<size_t>(far_idx)]);
    }

    std::vector<int> assign(static_cast<size_t>(n), 0);
    for (int iter = 0; iter < 10; ++iter) {
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < static_cast<int>(centers.size()); ++c) {
                double d = sq_dist(pts[static_cast<size_t>(i)], centers[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            assign[static_cast<size_t>(i)] = best;
        }
        for (int c = 0; c < static_cast<int>(centers.size()); ++c) {
            std::vector<double> acc(pts[0].size(), 0.0);
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (assign[static_cast<size_t>(i)] == c) {
                    ++count;
                    for (size_t j = 0; j < acc.size(); ++j) acc[j] += pts[static_cast<size_t>(i)][j];
                }
            }
            if (count > 0) {
                for (size_t j = 0; j < acc.size(); ++j) {
                    centers[static_cast<size_t>(c)][j] = static_cast<float>(acc[j] / count);
                }
            }
        }
    }
    return assign;
}

}  // namespace

GroupedWeights group_weights(const std::vector<RoutingDecision>& decisions, int group_count,
                             uint64_t seed) {
    if (decisions.empty()) throw ArgumentError("group_weights: empty batch");
    if (group_count < 1) throw ArgumentError("group_weights: group_count must be >= 1");
    const int n = static_cast<int>(decisions.size());

    GroupedWeights out;
    out.group_of.resize(static_cast<size_t>(n));

    // Degenerate case: every item is its own group, weights pass through
    // unchanged so the result matches per-sample routing bit-exactly.
    if (group_count >= n) {
        out.group_weights.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            out.group_of[static_cast<size_t>(i)] = i;
            out.group_weights.push_back(decisions[static_cast<size_t>(i)].weights);
        }
        return out;
    }

    std::map<int, std::vector<int>> bins;  // argmax -> item indices, both ascending
    for (int i = 0; i < n; ++i) bins[decisions[static_cast<size_t>(i)].argmax()].push_back(i);

    Rng root(seed);
    for (const auto& [argmax_id, members] : bins) {
        const int m = static_cast<int>(members.size());
        const int k = std::min(group_count, m);
        std::vector<std::vector<float>> pts;
        pts.reserve(static_cast<size_t>(m));
        for (int idx : members) pts.push_back(decisions[static_cast<size_t>(idx)].logits);

        std::vector<int> assign;
        if (k == 1) {
            assign.assign(static_cast<size_t>(m), 0);
        } else {
            Rng rng = root.fork("bin" + std::to_string(argmax_id));
            assign = kmeans_assign(pts, k, rng);
        }

        // Emit groups in cluster order; empty clusters are skipped.
        for (int c = 0; c < k; ++c) {
            std::vector<int> group_members;
            for (int i = 0; i < m; ++i) {
                if (assign[static_cast<size_t>(i)] == c) group_members.push_back(members[static_cast<size_t>(i)]);
            }
            if (group_members.empty()) continue;
            const int gid = static_cast<int>(out.group_weights.size());
            size_t t_count = decisions[0].weights.size();
            std::vector<float> merged(t_count, 0.0f);
            if (group_members.size() == 1) {
                merged = decisions[static_cast<size_t>(group_members[0])].weights;
            } else {
                std::vector<double> acc(t_count, 0.0);
                for (int idx : group_members) {
                    for (size_t j = 0; j < t_count; ++j) {
                        acc[j] += decisions[static_cast<size_t>(idx)].weights[j];
                    }
                }
                double total = 0.0;
                for (double v : acc) total += v;
                for (size_t j = 0; j < t_count; ++j) {
                    merged[j] = static_cast<float>(acc[j] / total);  // mean, renormalized
                }
            }
            for (int idx : group_members) out.group_of[static_cast<size_t>(idx)] = gid;
            out.group_weights.push_back(std::move(merged));
        }
    }
    return out;
}

}  // namespace twinforge
