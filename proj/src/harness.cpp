#include "twinforge/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "twinforge/errors.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

using nlohmann::json;

std::string format_score(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

double normalized_score(const std::vector<double>& scores, const std::vector<double>& ft_scores) {
    if (scores.size() != ft_scores.size()) {
        throw MetricError("normalized_score: score lists differ in length");
    }
    if (scores.empty()) throw MetricError("normalized_score: empty score lists");
    double acc = 0.0;
    for (size_t t = 0; t < scores.size(); ++t) {
        if (!(ft_scores[t] > 0.0)) {
            throw MetricError("normalized_score: reference score for task " + std::to_string(t) +
                              " is not positive");
        }
        acc += scores[t] / ft_scores[t];
    }
    return 100.0 * acc / static_cast<double>(scores.size());
}

StorageAccount storage_report(int64_t task_count, int64_t p, int64_t p_a, int64_t p_f,
                              int64_t p_r, double k) {
    if (task_count < 0 || p < 0 || p_a < 0 || p_f < 0 || p_r < 0) {
        throw ArgumentError("storage_report: counts must be non-negative");
    }
    if (!(k > 0.0 && k <= 1.0)) throw ArgumentError("storage_report: k must be in (0, 1]");
    StorageAccount acct;
    acct.task_count = task_count;
    acct.p = p;
    acct.p_a = p_a;
    acct.p_f = p_f;
    acct.p_r = p_r;
    acct.k = k;
    acct.bytes_finetuned = 2 * (task_count * p_a + p_f);
    acct.bytes_single = 2 * p;
    acct.bytes_twin = 2 * task_count * ceil_fraction(k, p_a) + 2 * p + p_r;
    return acct;
}

json StorageAccount::to_json() const {
    return json{{"tasks", task_count},   {"p", p},
                {"p_a", p_a},            {"p_f", p_f},
                {"p_r", p_r},            {"k", k},
                {"bytes_finetuned", bytes_finetuned},
                {"bytes_single", bytes_single},
                {"bytes_twin", bytes_twin}};
}

InferenceMode inference_mode_from_string(const std::string& s) {
    if (s == "per-sample" || s == "per_sample") return InferenceMode::kPerSample;
    if (s == "grouped") return InferenceMode::kGrouped;
    throw ArgumentError("unknown inference mode '" + s + "'");
}

std::string to_string(InferenceMode m) {
    return m == InferenceMode::kPerSample ? "per-sample" : "grouped";
}

json ExperimentReport::to_json() const {
    json per_task = json::array();
    for (double s : per_task_scores) per_task.push_back(s);
    json ft = json::array();
    for (double s : ft_scores) ft.push_back(s);
    return json{{"per_task_scores", per_task},
                {"ft_scores", ft},
                {"normalized_score", normalized},
                {"merged_model_count", merged_model_count},
                {"storage", storage.to_json()},
                {"config", config_echo}};
}

ExperimentReport run_inference(const Checkpoint& shared, const std::vector<TwinVector>& twins,
                               const Router& router, const TaskSuite& suite,
                               const std::vector<double>& ft_scores, const InferenceConfig& cfg) {
    const int64_t t_count = suite.task_count();
    if (static_cast<int64_t>(twins.size()) != t_count) {
        throw ConfigError("run_inference: " + std::to_string(twins.size()) + " twins for " +
                          std::to_string(t_count) + " tasks");
    }
    if (static_cast<int64_t>(ft_scores.size()) != t_count) {
        throw ConfigError("run_inference: reference scores do not match task count");
    }
    if (router.task_count() != t_count) {
        throw ConfigError("run_inference: router produces " + std::to_string(router.task_count()) +
                          " weights for " + std::to_string(t_count) + " tasks");
    }

    const auto start_time = std::chrono::steady_clock::now();
    ToyModel shared_model = ToyModel::from_checkpoint(shared);
    TwinCache cache(twins);

    struct Item {
        int task;
        int64_t index;
    };
    std::vector<Item> items;
    for (int64_t t = 0; t < t_count; ++t) {
        for (int64_t i = 0; i < suite.tasks[static_cast<size_t>(t)].test.size(); ++i) {
            items.push_back({static_cast<int>(t), i});
        }
    }
    if (items.empty()) throw DataError("run_inference: empty test sets");

    std::vector<RoutingDecision> decisions;
    decisions.reserve(items.size());
    for (const auto& it : items) {
        auto emb = shared_model.embed(suite.tasks[static_cast<size_t>(it.task)].test.row(it.index));
        decisions.push_back(router.route(emb));
    }

    GroupedWeights groups;
    if (cfg.mode == InferenceMode::kPerSample) {
        groups.group_of.resize(items.size());
        groups.group_weights.reserve(items.size());
        for (size_t i = 0; i < items.size(); ++i) {
            groups.group_of[i] = static_cast<int>(i);
            groups.group_weights.push_back(decisions[i].weights);
        }
    } else {
        groups = group_weights(decisions, cfg.group_count, cfg.seed);
    }

    std::vector<std::vector<size_t>> members(groups.group_weights.size());
    for (size_t i = 0; i < items.size(); ++i) {
        members[static_cast<size_t>(groups.group_of[i])].push_back(i);
    }

    std::vector<int> predictions(items.size(), -1);
    for (size_t g = 0; g < groups.group_weights.size(); ++g) {
        if (members[g].empty()) continue;
        std::vector<double> w(groups.group_weights[g].begin(), groups.group_weights[g].end());
        ToyModel merged = ToyModel::from_checkpoint(dynamic_merge(shared, cache, w));
        for (size_t idx : members[g]) {
            const auto& it = items[idx];
            predictions[idx] =
                merged.predict(suite.tasks[static_cast<size_t>(it.task)].test.row(it.index));
        }
    }

    std::vector<int64_t> correct(static_cast<size_t>(t_count), 0);
    std::vector<int64_t> totals(static_cast<size_t>(t_count), 0);
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        totals[static_cast<size_t>(it.task)]++;
        if (predictions[i] == suite.tasks[static_cast<size_t>(it.task)].test.y[static_cast<size_t>(it.index)]) {
            correct[static_cast<size_t>(it.task)]++;
        }
    }

    ExperimentReport report;
    report.ft_scores = ft_scores;
    for (int64_t t = 0; t < t_count; ++t) {
        report.per_task_scores.push_back(static_cast<double>(correct[static_cast<size_t>(t)]) /
                                         static_cast<double>(totals[static_cast<size_t>(t)]));
    }
    report.normalized = normalized_score(report.per_task_scores, ft_scores);
    report.merged_model_count = static_cast<int64_t>(groups.group_weights.size());
    report.predictions = std::move(predictions);

    // Storage accounting from the actual artifacts.
    const int64_t p = shared.param_count();
    int64_t p_a = 0;
    for (const auto& entry : twins[0].entries) {
        p_a += shared.at(entry.first).size();
    }
    const int64_t p_f = p - p_a;
    int64_t twin_params = 0;
    for (const auto& tv : twins) twin_params += tv.param_count();
    double k = p_a > 0 ? static_cast<double>(twin_params) / static_cast<double>(t_count) /
                             static_cast<double>(p_a)
                       : 1.0;
    k = std::min(1.0, std::max(k, 1e-12));
    report.storage = storage_report(t_count, p, p_a, p_f, router.param_count(), k);

    report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    report.config_echo = json{{"mode", to_string(cfg.mode)},
                              {"group_count", cfg.group_count},
                              {"seed", cfg.seed},
                              {"tasks", t_count}};
    return report;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Pipeline build_pipeline(const PipelineConfig& cfg) {
    SuiteConfig sc = cfg.suite;
    sc.seed = cfg.seed;

    Pipeline pipe;
    pipe.suite = TaskSuite::generate(sc);

    // Pretraining data: the pure global layout (shared_strength 1) from the
    // same seed, so the base holds the knowledge common to all tasks but
    // none of the task-specific rotations.
    SuiteConfig pre = sc;
    pre.task_count = 1;
    pre.shared_strength = 1.0;
    TaskSuite pretrain = TaskSuite::generate(pre);

    ModelConfig mc{sc.feature_dim, cfg.hidden_dim, sc.classes};
    ToyModel fresh = ToyModel::init(mc, fork_seed(cfg.seed, "model-init"));

    TrainConfig base_cfg = cfg.expert_train;
    base_cfg.epochs = cfg.base_epochs;
    base_cfg.use_adapter = false;
    base_cfg.seed = fork_seed(cfg.seed, "base-train");
    pipe.base = cfg.base_epochs > 0
                    ? train_expert(fresh, pretrain.tasks[0].train, base_cfg)
                    : fresh;

    // A short pass over the pooled task data leaves the base broadly exposed
    // to every task without mastering any of them.
    if (cfg.base_mix_epochs > 0) {
        std::vector<float> xs;
        std::vector<int> ys;
        for (const auto& td : pipe.suite.tasks) {
            xs.insert(xs.end(), td.train.x.values().begin(), td.train.x.values().end());
            ys.insert(ys.end(), td.train.y.begin(), td.train.y.end());
        }
        Dataset mixture;
        mixture.x = Tensor({static_cast<int64_t>(ys.size()), sc.feature_dim}, std::move(xs));
        mixture.y = std::move(ys);
        TrainConfig mix_cfg = cfg.expert_train;
        mix_cfg.epochs = cfg.base_mix_epochs;
        mix_cfg.use_adapter = false;
        mix_cfg.seed = fork_seed(cfg.seed, "base-mix-train");
        pipe.base = train_expert(pipe.base, mixture, mix_cfg);
    }

    if (!cfg.train_experts) return pipe;

    for (int64_t t = 0; t < pipe.suite.task_count(); ++t) {
        TrainConfig ec = cfg.expert_train;
        ec.seed = fork_seed(cfg.seed, "expert-train-" + std::to_string(t));
        pipe.experts.push_back(train_expert(pipe.base, pipe.suite.tasks[static_cast<size_t>(t)].train, ec));
        const ToyModel& expert = pipe.experts.back();
        const ToyModel scored = expert.has_adapter()
                                    ? ToyModel::from_checkpoint(expert.merge_adapter())
                                    : expert;
        pipe.ft_scores.push_back(scored.score(pipe.suite.tasks[static_cast<size_t>(t)].test));
        pipe.ft_val_scores.push_back(scored.score(pipe.suite.tasks[static_cast<size_t>(t)].val));
    }
    return pipe;
}

std::vector<Checkpoint> expert_checkpoints(const Pipeline& pipe) {
    std::vector<Checkpoint> out;
    out.reserve(pipe.experts.size());
    for (const auto& e : pipe.experts) {
        out.push_back(e.has_adapter() ? e.merge_adapter() : e.to_checkpoint());
    }
    return out;
}

std::vector<double> test_scores(const Checkpoint& merged, const TaskSuite& suite) {
    ToyModel m = ToyModel::from_checkpoint(merged);
    std::vector<double> scores;
    for (int64_t t = 0; t < suite.task_count(); ++t) {
        scores.push_back(m.score(suite.tasks[static_cast<size_t>(t)].test));
    }
    return scores;
}

namespace {

double mean_val_accuracy(const Checkpoint& merged, const Pipeline& pipe) {
    ToyModel m = ToyModel::from_checkpoint(merged);
    double acc = 0.0;
    for (int64_t t = 0; t < pipe.suite.task_count(); ++t) {
        acc += m.score(pipe.suite.tasks[static_cast<size_t>(t)].val);
    }
    return acc / static_cast<double>(pipe.suite.task_count());
}

}  // namespace

double search_gamma(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                    const Pipeline& pipe) {
    double best_gamma = 0.1;
    double best_acc = -1.0;
    for (int i = 1; i <= 10; ++i) {
        double gamma = 0.1 * i;
        std::vector<double> gammas(experts.size(), gamma);
        double acc = mean_val_accuracy(task_arithmetic(base, experts, gammas), pipe);
        if (acc > best_acc) {
            best_acc = acc;
            best_gamma = gamma;
        }
    }
    return best_gamma;
}

double search_ties_lambda(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                          const Pipeline& pipe, double density) {
    double best_lambda = 0.1;
    double best_acc = -1.0;
    for (int i = 1; i <= 10; ++i) {
        double lambda = 0.1 * i;
        double acc = mean_val_accuracy(ties_merge(base, experts, density, lambda), pipe);
        if (acc > best_acc) {
            best_acc = acc;
            best_lambda = lambda;
        }
    }
    return best_lambda;
}

RouterData collect_router_data(const ToyModel& shared, const TaskSuite& suite, Split split,
                               int max_items_per_task) {
    RouterData data;
    for (int64_t t = 0; t < suite.task_count(); ++t) {
        const TaskData& td = suite.tasks[static_cast<size_t>(t)];
        const Dataset& d = split == Split::kTrain ? td.train : split == Split::kVal ? td.val : td.test;
        const int64_t n = std::min<int64_t>(d.size(), max_items_per_task);
        for (int64_t i = 0; i < n; ++i) {
            data.embeddings.push_back(shared.embed(d.row(i)));
            data.task_ids.push_back(static_cast<int>(t));
        }
    }
    return data;
}

double routing_accuracy(const Router& router, const ToyModel& shared, const TaskSuite& suite,
                        Split split) {
    int64_t correct = 0, total = 0;
    for (int64_t t = 0; t < suite.task_count(); ++t) {
        const TaskData& td = suite.tasks[static_cast<size_t>(t)];
        const Dataset& d = split == Split::kTrain ? td.train : split == Split::kVal ? td.val : td.test;
        for (int64_t i = 0; i < d.size(); ++i) {
            RoutingDecision dec = router.route(shared.embed(d.row(i)));
            if (dec.argmax() == static_cast<int>(t)) ++correct;
            ++total;
        }
    }
    if (total == 0) throw DataError("routing_accuracy: empty split");
    return static_cast<double>(correct) / static_cast<double>(total);
}

TwinSetup build_twin_setup(const Pipeline& pipe, int64_t rank, const Router::TrainConfig& rt) {
    const int64_t t_count = pipe.suite.task_count();
    Checkpoint base = pipe.base.to_checkpoint();
    std::vector<Checkpoint> experts;
    for (const auto& e : pipe.experts) {
        experts.push_back(e.has_adapter() ? e.merge_adapter() : e.to_checkpoint());
    }

    TwinSetup setup;
    setup.gamma = t_count > 1 ? search_gamma(base, experts, pipe) : 1.0;
    std::vector<double> gammas(experts.size(), setup.gamma);
    const int64_t effective_rank = rank > 0 ? rank : std::numeric_limits<int32_t>::max();
    TwinPreprocess tp = twin_preprocess(base, experts, gammas, effective_rank);
    setup.shared = std::move(tp.shared);
    setup.twins = std::move(tp.twins);

    ToyModel shared_model = ToyModel::from_checkpoint(setup.shared);
    if (t_count >= 2) {
        RouterData data = collect_router_data(shared_model, pipe.suite, Split::kVal,
                                              rt.max_items_per_task);
        Router::TrainConfig cfg = rt;
        cfg.seed = fork_seed(pipe.suite.seed, "router-train");
        setup.router = train_router(data.embeddings, data.task_ids, t_count, cfg);
    } else {
        // A single-task router is the constant decision w = [1].
        setup.router = Router(shared_model.hidden_dim(), rt.hidden_dim, 1,
                              fork_seed(pipe.suite.seed, "router-train"));
    }
    return setup;
}

SparsifyMethod sparsify_method_from_string(const std::string& s) {
    if (s == "svd") return SparsifyMethod::kSvd;
    if (s == "magnitude") return SparsifyMethod::kMagnitude;
    if (s == "bernoulli" || s == "dare") return SparsifyMethod::kBernoulli;
    throw ArgumentError("unknown sparsify method '" + s + "'");
}

std::string to_string(SparsifyMethod m) {
    switch (m) {
        case SparsifyMethod::kSvd: return "svd";
        case SparsifyMethod::kMagnitude: return "magnitude";
        case SparsifyMethod::kBernoulli: return "bernoulli";
    }
    return "?";
}

TwinVector sparsify_delta(const Delta& d, double rate, SparsifyMethod method, uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("sparsity rate must be in [0, 1)");
    TwinVector out;
    switch (method) {
        case SparsifyMethod::kSvd: {
            int64_t max_rank = 0;
            for (const auto& [name, t] : d.params()) {
                if (t.rank() == 1) {
                    out.entries[name] = t;
                    continue;
                }
                SvdFactors full = svd(t);
                const int64_t m = full.rank();
                int64_t r = std::llround((1.0 - rate) * static_cast<double>(m));
                r = std::max<int64_t>(1, std::min(r, m));
                max_rank = std::max(max_rank, r);
                out.entries[name] = truncate(full, r);
            }
            out.rank = max_rank;
            return out;
        }
        case SparsifyMethod::kMagnitude: {
            Delta pruned = magnitude_prune(d, 1.0 - rate);
            for (const auto& [name, t] : pruned.params()) out.entries[name] = t;
            return out;
        }
        case SparsifyMethod::kBernoulli: {
            Delta dropped = rate > 0.0 ? dare_drop(d, rate, seed) : d;
            for (const auto& [name, t] : dropped.params()) out.entries[name] = t;
            return out;
        }
    }
    throw ArgumentError("unsupported sparsify method");
}

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

std::string CsvTable::to_string() const {
    std::string out;
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) out += ',';
        out += header[i];
    }
    out += '\n';
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += row[i];
        }
        out += '\n';
    }
    return out;
}

void write_sweep(const SweepResult& result, const std::filesystem::path& dir,
                 const std::string& name) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream csv(dir / (name + ".csv"), std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("cannot write sweep CSV under '" + dir.string() + "'");
        csv << result.csv.to_string();
    }
    {
        std::ofstream js(dir / (name + ".json"), std::ios::binary | std::ios::trunc);
        if (!js) throw IoError("cannot write sweep JSON under '" + dir.string() + "'");
        js << result.summary.dump(2) << "\n";
    }
}

}  // namespace twinforge
