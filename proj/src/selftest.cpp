#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "twinforge/errors.hpp"
#include "twinforge/harness.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.gaussian() * scale);
    return Tensor(std::move(shape), std::move(data));
}

Checkpoint random_checkpoint(uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Checkpoint::ParamMap params;
    params["layer0.w"] = random_tensor({8, 6}, rng, scale);
    params["layer0.b"] = random_tensor({8}, rng, scale);
    params["layer1.w"] = random_tensor({5, 8}, rng, scale);
    return Checkpoint(std::move(params));
}

bool bytes_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    return sa.str() == sb.str();
}

std::filesystem::path temp_file(const std::string& tag) {
    return std::filesystem::temp_directory_path() / ("twinforge-selftest-" + tag + ".bin");
}

}  // namespace

bool selftest(std::ostream& out) {
    int failures = 0;
    auto check = [&](const std::string& name, const std::function<bool()>& fn) {
        bool ok = false;
        std::string detail;
        try {
            ok = fn();
        } catch (const std::exception& e) {
            detail = e.what();
        }
        out << (ok ? "[ok]   " : "[FAIL] ") << name;
        if (!ok && !detail.empty()) out << "  (" << detail << ")";
        out << "\n";
        if (!ok) ++failures;
    };

    // --- linalg ---
    check("svd identity singular values", [] {
        SvdFactors f = svd(Tensor({2, 2}, {1, 0, 0, 1}));
        return std::abs(f.s.at(0) - 1.0f) < 1e-6f && std::abs(f.s.at(1) - 1.0f) < 1e-6f;
    });
    check("truncation residual equals singular tail", [] {
        Rng rng(7);
        for (int i = 0; i < 20; ++i) {
            Tensor m = random_tensor({9, 6}, rng);
            SvdFactors f = svd(m);
            for (int64_t r = 1; r <= f.rank(); ++r) {
                double got = frobenius_norm(sub(m, reconstruct(truncate(f, r))));
                double tail = 0.0;
                for (int64_t j = r; j < f.rank(); ++j) tail += static_cast<double>(f.s.at(j)) * f.s.at(j);
                if (std::abs(got - std::sqrt(tail)) > 1e-5 * frobenius_norm(m)) return false;
            }
        }
        return true;
    });
    check("svd reconstruction round-trip", [] {
        Rng rng(13);
        Tensor m = random_tensor({12, 7}, rng);
        return relative_error(reconstruct(svd(m)), m) < 1e-5;
    });

    // --- checkpoint ---
    check("container round-trip is bit-exact", [] {
        Checkpoint c = random_checkpoint(21);
        auto p1 = temp_file("rt1"), p2 = temp_file("rt2");
        save_checkpoint(c, p1);
        Checkpoint loaded = load_checkpoint(p1);
        save_checkpoint(loaded, p2);
        bool ok = bytes_equal(p1, p2);
        std::filesystem::remove(p1);
        std::filesystem::remove(p2);
        return ok;
    });
    check("diff/axpy inverse recovers exactly", [] {
        Checkpoint a = random_checkpoint(31), b = random_checkpoint(32);
        Checkpoint back = axpy(b, {diff(a, b)}, {1.0});
        for (const auto& [name, t] : a.params()) {
            if (std::memcmp(t.data(), back.at(name).data(), static_cast<size_t>(t.size()) * 4) != 0)
                return false;
        }
        return true;
    });

    // --- compress ---
    check("magnitude pruning keeps exactly the top entries", [] {
        Delta d(Checkpoint::ParamMap{{"t", Tensor({4}, {3, -1, 0.5, -4})}});
        Delta pruned = magnitude_prune(d, 0.5);
        const Tensor& t = pruned.at("t");
        return t.at(0) == 3.0f && t.at(1) == 0.0f && t.at(2) == 0.0f && t.at(3) == -4.0f;
    });
    check("drop-and-rescale is unbiased (Monte-Carlo)", [] {
        Rng rng(41);
        Tensor base = random_tensor({50}, rng);
        Delta d(Checkpoint::ParamMap{{"t", base}});
        const double p = 0.7;
        const int trials = 2000;
        std::vector<double> mean(50, 0.0);
        for (int i = 0; i < trials; ++i) {
            Delta dropped = dare_drop(d, p, 1000 + static_cast<uint64_t>(i));
            for (int64_t j = 0; j < 50; ++j) mean[static_cast<size_t>(j)] += dropped.at("t").at(j);
        }
        for (int64_t j = 0; j < 50; ++j) {
            double m = mean[static_cast<size_t>(j)] / trials;
            double se = std::abs(base.at(j)) * std::sqrt(p / ((1.0 - p) * trials));
            if (std::abs(m - base.at(j)) > 8.0 * se + 1e-12) return false;
        }
        return true;
    });
    check("full-rank compression is lossless", [] {
        Checkpoint a = random_checkpoint(51), b = random_checkpoint(52);
        Delta d = diff(a, b);
        Delta back = decompress(svd_compress(d, 1 << 20));
        for (const auto& [name, t] : d.params()) {
            if (relative_error(back.at(name), t) > 1e-5) return false;
        }
        return true;
    });

    // --- merge ---
    check("single-expert identities", [] {
        Checkpoint base = random_checkpoint(61), expert = random_checkpoint(62);
        Checkpoint ta = task_arithmetic(base, {expert}, {1.0});
        Checkpoint ties = ties_merge(base, {expert}, 1.0, 1.0);
        for (const auto& [name, t] : expert.params()) {
            if (std::memcmp(t.data(), ta.at(name).data(), static_cast<size_t>(t.size()) * 4) != 0)
                return false;
            if (std::memcmp(t.data(), ties.at(name).data(), static_cast<size_t>(t.size()) * 4) != 0)
                return false;
        }
        return true;
    });
    check("one-hot dynamic merge recovers each expert", [] {
        Checkpoint base = random_checkpoint(71);
        std::vector<Checkpoint> experts = {random_checkpoint(72), random_checkpoint(73),
                                           random_checkpoint(74)};
        TwinPreprocess tp = twin_preprocess(base, experts, {0.3, 0.3, 0.3}, 1 << 20);
        for (size_t t = 0; t < experts.size(); ++t) {
            std::vector<double> w(experts.size(), 0.0);
            w[t] = 1.0;
            Checkpoint merged = dynamic_merge(tp.shared, tp.twins, w);
            for (const auto& [name, tensor] : experts[t].params()) {
                if (relative_error(merged.at(name), tensor) > 1e-5) return false;
            }
        }
        return true;
    });

    // --- router ---
    check("fresh router emits uniform weights", [] {
        Router r(6, 8, 4, 99);
        std::vector<float> emb(6, 0.7f);
        RoutingDecision d = r.route(emb);
        for (float w : d.weights) {
            if (std::abs(w - 0.25f) > 1e-6f) return false;
        }
        return true;
    });
    check("routing weights are a distribution", [] {
        Router r(6, 8, 3, 123);
        Rng rng(5);
        for (int i = 0; i < 10; ++i) {
            std::vector<float> emb(6);
            for (auto& v : emb) v = static_cast<float>(rng.gaussian());
            RoutingDecision d = r.route(emb);
            double sum = 0.0;
            for (float w : d.weights) {
                if (w < 0.0f) return false;
                sum += w;
            }
            if (std::abs(sum - 1.0) > 1e-6) return false;
        }
        return true;
    });
    check("grouping degenerates to per-sample routing", [] {
        Rng rng(7);
        std::vector<RoutingDecision> decisions;
        Router r(4, 8, 3, 3);
        for (int i = 0; i < 12; ++i) {
            std::vector<float> emb(4);
            for (auto& v : emb) v = static_cast<float>(rng.gaussian());
            decisions.push_back(r.route(emb));
        }
        GroupedWeights g = group_weights(decisions, 100, 0);
        for (size_t i = 0; i < decisions.size(); ++i) {
            if (g.group_of[i] != static_cast<int>(i)) return false;
            if (g.group_weights[i] != decisions[i].weights) return false;
        }
        return true;
    });

    // --- toyzoo ---
    check("suite generation is deterministic", [] {
        SuiteConfig sc;
        sc.n_per_task = 200;
        TaskSuite a = TaskSuite::generate(sc);
        TaskSuite b = TaskSuite::generate(sc);
        auto pa = temp_file("suite-a"), pb = temp_file("suite-b");
        a.save(pa);
        b.save(pb);
        bool ok = bytes_equal(pa, pb);
        std::filesystem::remove(pa);
        std::filesystem::remove(pb);
        return ok;
    });
    check("adapter fold equals base plus low-rank product", [] {
        ToyModel m = ToyModel::init({10, 12, 3}, 7);
        Checkpoint before = m.to_checkpoint();
        m.attach_adapter(3, {0, 1, 2}, 8);
        Checkpoint folded = m.merge_adapter();
        for (const auto& [name, t] : before.params()) {
            if (std::memcmp(t.data(), folded.at(name).data(), static_cast<size_t>(t.size()) * 4) != 0)
                return false;  // zero-initialized adapters must fold to the base
        }
        return true;
    });
    check("adapter-level twin merging matches dense twin merging", [] {
        // Both routes of the low-rank equivalence, on one seeded configuration.
        Rng rng(17);
        ToyModel base_model = ToyModel::init({6, 8, 3}, 11);
        Checkpoint base = base_model.to_checkpoint();
        const int t_count = 3;
        const std::vector<double> gammas(t_count, 0.4);
        const std::vector<double> w = {0.2, 0.5, 0.3};
        const int64_t rank = 2;

        std::vector<Checkpoint> folded;
        std::vector<Delta> adapter_deltas;
        for (int t = 0; t < t_count; ++t) {
            Checkpoint::ParamMap dparams;
            for (int layer = 0; layer < 3; ++layer) {
                const Tensor& w_base = base.at("layer" + std::to_string(layer) + ".w");
                Tensor a = random_tensor({2, w_base.cols()}, rng, 0.3);
                Tensor b = random_tensor({w_base.rows(), 2}, rng, 0.3);
                dparams["layer" + std::to_string(layer) + ".w"] = matmul(b, a);
                dparams["layer" + std::to_string(layer) + ".b"] =
                    Tensor::zeros({base.at("layer" + std::to_string(layer) + ".b").size()});
            }
            adapter_deltas.emplace_back(Checkpoint(std::move(dparams)));
            folded.push_back(axpy(base, {adapter_deltas.back()}, {1.0}));
        }

        // Dense route.
        TwinPreprocess dense = twin_preprocess(base, folded, gammas, rank);
        Checkpoint dense_merged = dynamic_merge(dense.shared, dense.twins, w);

        // Adapter route.
        Checkpoint zeros;
        {
            Checkpoint::ParamMap z;
            for (const auto& [name, t] : base.params()) z[name] = Tensor::zeros(t.shape());
            zeros = Checkpoint(std::move(z));
        }
        Checkpoint shared_adapter = axpy(zeros, adapter_deltas, gammas);
        std::vector<TwinVector> twins;
        for (int t = 0; t < t_count; ++t) {
            twins.push_back(svd_compress(diff(adapter_deltas[static_cast<size_t>(t)], shared_adapter), rank));
        }
        Checkpoint adapter_star = dynamic_merge(shared_adapter, twins, w);
        Checkpoint adapter_merged = axpy(base, {adapter_star}, {1.0});

        for (const auto& [name, t] : dense_merged.params()) {
            double denom = std::max(frobenius_norm(t), 1e-6);
            if (frobenius_norm(sub(adapter_merged.at(name), t)) / denom > 1e-5) return false;
        }
        return true;
    });

    // --- harness ---
    check("normalized score identities", [] {
        double full = normalized_score({0.8, 0.6}, {0.8, 0.6});
        double half = normalized_score({0.5, 1.0}, {1.0, 1.0});
        double over = normalized_score({0.9}, {0.8});
        return std::abs(full - 100.0) < 1e-9 && std::abs(half - 75.0) < 1e-9 && over > 100.0;
    });
    check("storage byte formulas", [] {
        StorageAccount a = storage_report(8, 1000000, 1000000, 0, 10000, 0.001);
        StorageAccount b = storage_report(1, 500, 500, 0, 0, 1.0);
        return a.bytes_twin == 2026000 && b.bytes_finetuned == 1000 && b.bytes_single == 1000 &&
               b.bytes_twin == 2000;
    });

    out << (failures == 0 ? "selftest passed" : "selftest FAILED") << " ("
        << failures << " failing checks)\n";
    return failures == 0;
}

}  // namespace twinforge
