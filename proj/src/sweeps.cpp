#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <thread>

#include "twinforge/errors.hpp"
#include "twinforge/harness.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

using nlohmann::json;

namespace {

std::string fmt_knob(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// Runs independent experiment cells, each writing into its own slot;
// assembly afterwards is in deterministic cell order.
void run_cells(int jobs, std::vector<std::function<void()>>& cells) {
    if (jobs <= 1) {
        for (auto& cell : cells) cell();
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    const int count = std::min<int>(jobs, static_cast<int>(cells.size()));
    workers.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        workers.emplace_back([&] {
            while (true) {
                size_t idx = next.fetch_add(1);
                if (idx >= cells.size()) break;
                cells[idx]();
            }
        });
    }
    for (auto& w : workers) w.join();
}

void emit_method_rows(CsvTable& csv, const std::string& config, const std::string& method,
                      const std::vector<double>& per_task, double normalized) {
    for (size_t t = 0; t < per_task.size(); ++t) {
        csv.add_row({config, method, "task" + std::to_string(t), format_score(per_task[t])});
    }
    csv.add_row({config, method, "normalized", format_score(normalized)});
}

json cell_json(const std::string& config, const std::string& method,
               const std::vector<double>& per_task, double normalized) {
    json per = json::array();
    for (double v : per_task) per.push_back(v);
    return json{{"config", config}, {"method", method}, {"per_task", per}, {"normalized", normalized}};
}

CsvTable make_table() {
    CsvTable t;
    t.header = {"config", "method", "task", "score"};
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// sweep_sparsity
// ---------------------------------------------------------------------------

SweepResult sweep_sparsity(const PipelineConfig& cfg, const std::vector<double>& rates,
                           const std::vector<uint64_t>& seeds, int jobs) {
    struct MethodResult {
        std::vector<double> per_task;
        double normalized = 0.0;
    };
    struct CellResult {
        double baseline_normalized = 0.0;
        std::map<std::pair<size_t, int>, MethodResult> by_rate_method;
    };
    std::vector<CellResult> results(seeds.size());

    const std::vector<SparsifyMethod> methods = {SparsifyMethod::kSvd, SparsifyMethod::kMagnitude,
                                                 SparsifyMethod::kBernoulli};

    std::vector<std::function<void()>> cells;
    for (size_t si = 0; si < seeds.size(); ++si) {
        cells.emplace_back([&, si] {
            PipelineConfig pc = cfg;
            pc.seed = seeds[si];
            Pipeline pipe = build_pipeline(pc);
            TwinSetup setup = build_twin_setup(pipe, 0, cfg.router_train);

            InferenceConfig inf;
            inf.seed = seeds[si];
            ExperimentReport baseline = run_inference(setup.shared, setup.twins, setup.router,
                                                      pipe.suite, pipe.ft_scores, inf);
            results[si].baseline_normalized = baseline.normalized;

            std::vector<Checkpoint> experts = expert_checkpoints(pipe);
            std::vector<Delta> residuals;
            for (const auto& e : experts) residuals.push_back(diff(e, setup.shared));

            for (size_t ri = 0; ri < rates.size(); ++ri) {
                for (int mi = 0; mi < static_cast<int>(methods.size()); ++mi) {
                    std::vector<TwinVector> twins;
                    for (size_t t = 0; t < residuals.size(); ++t) {
                        twins.push_back(sparsify_delta(
                            residuals[t], rates[ri], methods[static_cast<size_t>(mi)],
                            fork_seed(seeds[si], "sparsify-" + std::to_string(t))));
                    }
                    ExperimentReport rep = run_inference(setup.shared, twins, setup.router,
                                                         pipe.suite, pipe.ft_scores, inf);
                    results[si].by_rate_method[{ri, mi}] = {rep.per_task_scores, rep.normalized};
                }
            }
        });
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    for (size_t si = 0; si < seeds.size(); ++si) {
        for (size_t ri = 0; ri < rates.size(); ++ri) {
            for (int mi = 0; mi < static_cast<int>(methods.size()); ++mi) {
                const auto& mr = results[si].by_rate_method.at({ri, mi});
                std::string config =
                    "rate=" + fmt_knob(rates[ri]) + ";seed=" + std::to_string(seeds[si]);
                std::string method = to_string(methods[static_cast<size_t>(mi)]);
                emit_method_rows(out.csv, config, method, mr.per_task, mr.normalized);
                cells_json.push_back(cell_json(config, method, mr.per_task, mr.normalized));
            }
        }
    }

    json means = json::array();
    for (size_t ri = 0; ri < rates.size(); ++ri) {
        for (int mi = 0; mi < static_cast<int>(methods.size()); ++mi) {
            double acc = 0.0;
            for (size_t si = 0; si < seeds.size(); ++si) {
                acc += results[si].by_rate_method.at({ri, mi}).normalized;
            }
            means.push_back(json{{"rate", rates[ri]},
                                 {"method", to_string(methods[static_cast<size_t>(mi)])},
                                 {"normalized_mean", acc / static_cast<double>(seeds.size())}});
        }
    }
    json baseline = json::array();
    double base_acc = 0.0;
    for (size_t si = 0; si < seeds.size(); ++si) {
        baseline.push_back(json{{"seed", seeds[si]},
                                {"normalized", results[si].baseline_normalized}});
        base_acc += results[si].baseline_normalized;
    }

    out.summary = json{{"experiment", "sparsity"},
                       {"seeds", seeds},
                       {"rates", rates},
                       {"cells", cells_json},
                       {"means", means},
                       {"baseline", baseline},
                       {"baseline_normalized_mean", base_acc / static_cast<double>(seeds.size())}};
    return out;
}

// ---------------------------------------------------------------------------
// sweep_tasks
// ---------------------------------------------------------------------------

SweepResult sweep_tasks(const PipelineConfig& cfg, const std::vector<int64_t>& task_counts,
                        const std::vector<uint64_t>& seeds, int jobs) {
    struct CellResult {
        std::map<std::string, std::pair<std::vector<double>, double>> methods;
    };
    std::vector<CellResult> results(task_counts.size() * seeds.size());

    std::vector<std::function<void()>> cells;
    for (size_t ti = 0; ti < task_counts.size(); ++ti) {
        for (size_t si = 0; si < seeds.size(); ++si) {
            const size_t slot = ti * seeds.size() + si;
            cells.emplace_back([&, ti, si, slot] {
                PipelineConfig pc = cfg;
                pc.suite.task_count = task_counts[ti];
                pc.seed = seeds[si];
                Pipeline pipe = build_pipeline(pc);
                Checkpoint base = pipe.base.to_checkpoint();
                std::vector<Checkpoint> experts = expert_checkpoints(pipe);

                auto record = [&](const std::string& method, const std::vector<double>& scores) {
                    results[slot].methods[method] = {scores,
                                                     normalized_score(scores, pipe.ft_scores)};
                };
                record("average", test_scores(weight_average(experts), pipe.suite));
                double gamma = search_gamma(base, experts, pipe);
                std::vector<double> gammas(experts.size(), gamma);
                record("task-arithmetic", test_scores(task_arithmetic(base, experts, gammas), pipe.suite));

                TwinSetup setup = build_twin_setup(pipe, 0, cfg.router_train);
                InferenceConfig inf;
                inf.seed = seeds[si];
                ExperimentReport rep = run_inference(setup.shared, setup.twins, setup.router,
                                                     pipe.suite, pipe.ft_scores, inf);
                results[slot].methods["twin"] = {rep.per_task_scores, rep.normalized};
            });
        }
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    json means = json::array();
    const std::vector<std::string> method_names = {"average", "task-arithmetic", "twin"};
    for (size_t ti = 0; ti < task_counts.size(); ++ti) {
        std::map<std::string, double> mean_acc;
        for (size_t si = 0; si < seeds.size(); ++si) {
            const auto& cell = results[ti * seeds.size() + si];
            std::string config = "tasks=" + std::to_string(task_counts[ti]) +
                                 ";seed=" + std::to_string(seeds[si]);
            for (const auto& name : method_names) {
                const auto& [scores, normalized] = cell.methods.at(name);
                emit_method_rows(out.csv, config, name, scores, normalized);
                cells_json.push_back(cell_json(config, name, scores, normalized));
                mean_acc[name] += normalized;
            }
        }
        for (const auto& name : method_names) {
            means.push_back(json{{"tasks", task_counts[ti]},
                                 {"method", name},
                                 {"normalized_mean",
                                  mean_acc[name] / static_cast<double>(seeds.size())}});
        }
    }
    out.summary = json{{"experiment", "tasks"},
                       {"seeds", seeds},
                       {"task_counts", task_counts},
                       {"cells", cells_json},
                       {"means", means}};
    return out;
}

// ---------------------------------------------------------------------------
// sweep_epochs
// ---------------------------------------------------------------------------

SweepResult sweep_epochs(const PipelineConfig& cfg, const std::vector<int>& epoch_values,
                         const std::vector<uint64_t>& seeds, int jobs) {
    struct CellResult {
        std::vector<double> merged_scores;
        double merged_normalized = 0.0;
        std::vector<double> own_scores;
        double own_mean = 0.0;
        double gamma = 0.0;
    };
    std::vector<CellResult> results(epoch_values.size() * seeds.size());

    std::vector<std::function<void()>> cells;
    for (size_t ei = 0; ei < epoch_values.size(); ++ei) {
        for (size_t si = 0; si < seeds.size(); ++si) {
            const size_t slot = ei * seeds.size() + si;
            cells.emplace_back([&, ei, si, slot] {
                PipelineConfig pc = cfg;
                pc.expert_train.epochs = epoch_values[ei];
                pc.seed = seeds[si];
                Pipeline pipe = build_pipeline(pc);
                Checkpoint base = pipe.base.to_checkpoint();
                std::vector<Checkpoint> experts = expert_checkpoints(pipe);

                CellResult& r = results[slot];
                r.gamma = search_gamma(base, experts, pipe);
                std::vector<double> gammas(experts.size(), r.gamma);
                r.merged_scores = test_scores(task_arithmetic(base, experts, gammas), pipe.suite);
                r.merged_normalized = normalized_score(r.merged_scores, pipe.ft_scores);
                r.own_scores = pipe.ft_scores;
                double acc = 0.0;
                for (double v : r.own_scores) acc += v;
                r.own_mean = acc / static_cast<double>(r.own_scores.size());
            });
        }
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    json means = json::array();
    for (size_t ei = 0; ei < epoch_values.size(); ++ei) {
        double norm_acc = 0.0, own_acc = 0.0;
        for (size_t si = 0; si < seeds.size(); ++si) {
            const auto& r = results[ei * seeds.size() + si];
            std::string config = "epochs=" + std::to_string(epoch_values[ei]) +
                                 ";seed=" + std::to_string(seeds[si]);
            emit_method_rows(out.csv, config, "task-arithmetic", r.merged_scores,
                             r.merged_normalized);
            for (size_t t = 0; t < r.own_scores.size(); ++t) {
                out.csv.add_row({config, "expert", "task" + std::to_string(t),
                                 format_score(r.own_scores[t])});
            }
            out.csv.add_row({config, "expert", "own_mean", format_score(r.own_mean)});
            cells_json.push_back(json{{"config", config},
                                      {"gamma", r.gamma},
                                      {"merged_normalized", r.merged_normalized},
                                      {"own_mean", r.own_mean}});
            norm_acc += r.merged_normalized;
            own_acc += r.own_mean;
        }
        means.push_back(json{{"epochs", epoch_values[ei]},
                             {"merged_normalized_mean", norm_acc / static_cast<double>(seeds.size())},
                             {"own_mean", own_acc / static_cast<double>(seeds.size())}});
    }
    out.summary = json{{"experiment", "epochs"},
                       {"seeds", seeds},
                       {"epoch_values", epoch_values},
                       {"cells", cells_json},
                       {"means", means}};
    return out;
}

// ---------------------------------------------------------------------------
// sweep_single_task_sparsity
// ---------------------------------------------------------------------------

SweepResult sweep_single_task_sparsity(const PipelineConfig& cfg, const std::vector<double>& rates,
                                       const std::vector<uint64_t>& seeds, int jobs) {
    struct CellResult {
        std::vector<double> scores;  // per rate, task-0 accuracy of base+sparsified delta
        double ft0 = 0.0;
        double base0 = 0.0;
    };
    std::vector<CellResult> results(seeds.size());

    std::vector<std::function<void()>> cells;
    for (size_t si = 0; si < seeds.size(); ++si) {
        cells.emplace_back([&, si] {
            PipelineConfig pc = cfg;
            pc.seed = seeds[si];
            Pipeline pipe = build_pipeline(pc);
            Checkpoint base = pipe.base.to_checkpoint();
            std::vector<Checkpoint> experts = expert_checkpoints(pipe);
            Delta task_vector = diff(experts[0], base);

            CellResult& r = results[si];
            r.ft0 = pipe.ft_scores[0];
            r.base0 = pipe.base.score(pipe.suite.tasks[0].test);
            for (double rate : rates) {
                TwinVector tv = sparsify_delta(task_vector, rate, SparsifyMethod::kSvd,
                                               fork_seed(seeds[si], "single-task"));
                Checkpoint merged = axpy(base, {decompress(tv)}, {1.0});
                r.scores.push_back(ToyModel::from_checkpoint(merged)
                                       .score(pipe.suite.tasks[0].test));
            }
        });
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    for (size_t si = 0; si < seeds.size(); ++si) {
        const auto& r = results[si];
        for (size_t ri = 0; ri < rates.size(); ++ri) {
            std::string config = "rate=" + fmt_knob(rates[ri]) + ";seed=" + std::to_string(seeds[si]);
            out.csv.add_row({config, "svd", "task0", format_score(r.scores[ri])});
            double normalized = 100.0 * r.scores[ri] / r.ft0;
            out.csv.add_row({config, "svd", "normalized", format_score(normalized)});
            cells_json.push_back(json{{"config", config},
                                      {"score", r.scores[ri]},
                                      {"normalized", normalized},
                                      {"base_score", r.base0}});
        }
    }
    out.summary = json{{"experiment", "single-task-sparsity"},
                       {"seeds", seeds},
                       {"rates", rates},
                       {"cells", cells_json}};
    return out;
}

// ---------------------------------------------------------------------------
// coeff_grid
// ---------------------------------------------------------------------------

SweepResult coeff_grid(const PipelineConfig& cfg, double gamma_min, double gamma_max, double step,
                       const std::vector<uint64_t>& seeds, int jobs) {
    if (!(step > 0.0) || gamma_max < gamma_min) throw ArgumentError("bad coefficient grid");
    std::vector<double> grid;
    for (double g = gamma_min; g <= gamma_max + 1e-9; g += step) grid.push_back(g);

    struct CellResult {
        std::vector<std::vector<double>> scores;  // grid^2 -> per-task
        std::vector<double> ft;
    };
    std::vector<CellResult> results(seeds.size());

    std::vector<std::function<void()>> cells;
    for (size_t si = 0; si < seeds.size(); ++si) {
        cells.emplace_back([&, si] {
            PipelineConfig pc = cfg;
            pc.suite.task_count = 2;  // two in-domain experts, per-axis coefficients
            pc.seed = seeds[si];
            Pipeline pipe = build_pipeline(pc);
            Checkpoint base = pipe.base.to_checkpoint();
            std::vector<Checkpoint> experts = expert_checkpoints(pipe);

            CellResult& r = results[si];
            r.ft = pipe.ft_scores;
            for (double g0 : grid) {
                for (double g1 : grid) {
                    Checkpoint merged = task_arithmetic(base, experts, {g0, g1});
                    r.scores.push_back(test_scores(merged, pipe.suite));
                }
            }
        });
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    for (size_t si = 0; si < seeds.size(); ++si) {
        const auto& r = results[si];
        size_t idx = 0;
        for (double g0 : grid) {
            for (double g1 : grid) {
                std::string config = "g0=" + fmt_knob(g0) + ";g1=" + fmt_knob(g1) +
                                     ";seed=" + std::to_string(seeds[si]);
                const auto& scores = r.scores[idx++];
                double normalized = normalized_score(scores, r.ft);
                emit_method_rows(out.csv, config, "task-arithmetic", scores, normalized);
                cells_json.push_back(cell_json(config, "task-arithmetic", scores, normalized));
            }
        }
    }
    out.summary = json{{"experiment", "coeff-grid"},
                       {"seeds", seeds},
                       {"grid", grid},
                       {"cells", cells_json}};
    return out;
}

// ---------------------------------------------------------------------------
// nonoverlap_experiment
// ---------------------------------------------------------------------------

SweepResult nonoverlap_experiment(const PipelineConfig& cfg, const std::vector<uint64_t>& seeds,
                                  int jobs) {
    struct VariantResult {
        std::vector<double> own;     // per-expert own-task accuracy
        std::vector<double> merged;  // merged model per-task accuracy
        double gamma = 0.0;
    };
    struct CellResult {
        VariantResult nonoverlap;
        VariantResult overlap;
    };
    std::vector<CellResult> results(seeds.size());

    std::vector<std::function<void()>> cells;
    for (size_t si = 0; si < seeds.size(); ++si) {
        cells.emplace_back([&, si] {
            PipelineConfig pc = cfg;
            pc.suite.task_count = 2;
            pc.seed = seeds[si];
            pc.train_experts = false;  // adapter experts are trained below
            Pipeline pipe = build_pipeline(pc);
            Checkpoint base = pipe.base.to_checkpoint();

            auto run_variant = [&](const std::vector<int>& layers_a,
                                   const std::vector<int>& layers_b) {
                VariantResult vr;
                std::vector<Checkpoint> folded;
                for (int t = 0; t < 2; ++t) {
                    TrainConfig tc = pc.expert_train;
                    tc.use_adapter = true;
                    tc.adapter_layers = (t == 0) ? layers_a : layers_b;
                    tc.seed = fork_seed(seeds[si], "adapter-expert-" + std::to_string(t));
                    ToyModel expert =
                        train_expert(pipe.base, pipe.suite.tasks[static_cast<size_t>(t)].train, tc);
                    folded.push_back(expert.merge_adapter());
                    vr.own.push_back(ToyModel::from_checkpoint(folded.back())
                                         .score(pipe.suite.tasks[static_cast<size_t>(t)].test));
                }
                Pipeline scored = pipe;  // validation splits for the gamma search
                scored.ft_scores = vr.own;
                vr.gamma = search_gamma(base, folded, scored);
                Checkpoint merged = task_arithmetic(base, folded, {vr.gamma, vr.gamma});
                vr.merged = test_scores(merged, pipe.suite);
                return vr;
            };

            // Task-specific knowledge in disjoint layers vs the same layers.
            results[si].nonoverlap = run_variant({0}, {1});
            results[si].overlap = run_variant({0, 1}, {0, 1});
        });
    }
    run_cells(jobs, cells);

    SweepResult out;
    out.csv = make_table();
    json cells_json = json::array();
    double no_merged_mean = 0.0, no_own_mean = 0.0;
    for (size_t si = 0; si < seeds.size(); ++si) {
        const std::pair<std::string, const VariantResult*> variants[] = {
            {"nonoverlap", &results[si].nonoverlap}, {"overlap", &results[si].overlap}};
        for (const auto& [variant, vr_ptr] : variants) {
            const VariantResult& vr = *vr_ptr;
            std::string config = "variant=" + variant + ";seed=" + std::to_string(seeds[si]);
            for (size_t t = 0; t < vr.own.size(); ++t) {
                out.csv.add_row({config, "expert", "task" + std::to_string(t), format_score(vr.own[t])});
            }
            double normalized = normalized_score(vr.merged, vr.own);
            emit_method_rows(out.csv, config, "task-arithmetic", vr.merged, normalized);
            double own_mean = (vr.own[0] + vr.own[1]) / 2.0;
            double merged_mean = (vr.merged[0] + vr.merged[1]) / 2.0;
            cells_json.push_back(json{{"config", config},
                                      {"variant", variant},
                                      {"gamma", vr.gamma},
                                      {"own_mean", own_mean},
                                      {"merged_mean", merged_mean},
                                      {"normalized", normalized}});
            if (variant == "nonoverlap") {
                no_merged_mean += merged_mean;
                no_own_mean += own_mean;
            }
        }
    }
    out.summary = json{{"experiment", "nonoverlap"},
                       {"seeds", seeds},
                       {"cells", cells_json},
                       {"nonoverlap_merged_mean", no_merged_mean / static_cast<double>(seeds.size())},
                       {"nonoverlap_own_mean", no_own_mean / static_cast<double>(seeds.size())}};
    return out;
}

}  // namespace twinforge
