#include "twinforge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "twinforge/errors.hpp"

namespace twinforge {

MergeMethod merge_method_from_string(const std::string& s) {
    if (s == "average" || s == "weight-average") return MergeMethod::kAverage;
    if (s == "task-arithmetic" || s == "task_arithmetic") return MergeMethod::kTaskArithmetic;
    if (s == "ties") return MergeMethod::kTies;
    if (s == "twin") return MergeMethod::kTwin;
    throw ArgumentError("unknown merge method '" + s + "'");
}

std::string to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::kAverage: return "average";
        case MergeMethod::kTaskArithmetic: return "task-arithmetic";
        case MergeMethod::kTies: return "ties";
        case MergeMethod::kTwin: return "twin";
    }
    return "?";
}

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * 4) == 0;
}

// Union of the inputs' frozen sets; every frozen tensor must be bit-identical
// across all inputs (the experts share one pretrained backbone).
std::set<std::string> collect_frozen(const std::vector<const Checkpoint*>& inputs) {
    std::set<std::string> frozen;
    for (const auto* c : inputs) {
        for (const auto& name : c->frozen_names()) frozen.insert(name);
    }
    for (const auto& name : frozen) {
        const Tensor& ref = inputs.front()->at(name);
        for (const auto* c : inputs) {
            if (!bit_equal(c->at(name), ref)) {
                throw CompatError("frozen tensor '" + name + "' differs between checkpoints");
            }
        }
    }
    return frozen;
}

void require_nonempty(const std::vector<Checkpoint>& experts, const char* op) {
    if (experts.empty()) throw CompatError(std::string(op) + ": need at least one expert");
}

}  // namespace

Checkpoint weight_average(const std::vector<Checkpoint>& experts) {
    require_nonempty(experts, "weight_average");
    for (size_t i = 1; i < experts.size(); ++i) check_compatible(experts[0], experts[i]);

    std::vector<const Checkpoint*> inputs;
    for (const auto& e : experts) inputs.push_back(&e);
    std::set<std::string> frozen = collect_frozen(inputs);

    const double inv = 1.0 / static_cast<double>(experts.size());
    Checkpoint::ParamMap params;
    for (const auto& [name, t0] : experts[0].params()) {
        if (frozen.count(name)) {
            params[name] = t0;
            continue;
        }
        Tensor out = t0;
        for (int64_t i = 0; i < out.size(); ++i) {
            double acc = 0.0;
            for (const auto& e : experts) acc += inv * static_cast<double>(e.at(name).at(i));
            out.at(i) = static_cast<float>(acc);
        }
        params[name] = std::move(out);
    }
    return Checkpoint(std::move(params), experts[0].meta());
}

Checkpoint task_arithmetic(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                           const std::vector<double>& gammas) {
    require_nonempty(experts, "task_arithmetic");
    if (experts.size() != gammas.size()) {
        throw ArgumentError("task_arithmetic: " + std::to_string(experts.size()) +
                            " experts but " + std::to_string(gammas.size()) + " gammas");
    }
    for (const auto& e : experts) check_compatible(base, e);

    std::vector<const Checkpoint*> inputs{&base};
    for (const auto& e : experts) inputs.push_back(&e);
    std::set<std::string> frozen = collect_frozen(inputs);

    Checkpoint::ParamMap params;
    for (const auto& [name, tb] : base.params()) {
        if (frozen.count(name)) {
            params[name] = tb;
            continue;
        }
        std::vector<const Tensor*> parts;
        for (const auto& e : experts) parts.push_back(&e.at(name));
        Tensor out = tb;
        for (int64_t i = 0; i < out.size(); ++i) {
            double acc = static_cast<double>(tb.at(i));
            for (size_t t = 0; t < parts.size(); ++t) {
                acc += gammas[t] *
                       (static_cast<double>(parts[t]->at(i)) - static_cast<double>(tb.at(i)));
            }
            out.at(i) = static_cast<float>(acc);
        }
        params[name] = std::move(out);
    }
    return Checkpoint(std::move(params), base.meta());
}

Checkpoint ties_merge(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                      double density, double lambda) {
    require_nonempty(experts, "ties_merge");
    if (!(density > 0.0 && density <= 1.0)) {
        throw ArgumentError("ties_merge density must be in (0, 1]");
    }
    if (!std::isfinite(lambda)) throw ArgumentError("ties_merge lambda must be finite");
    for (const auto& e : experts) check_compatible(base, e);

    std::vector<const Checkpoint*> inputs{&base};
    for (const auto& e : experts) inputs.push_back(&e);
    std::set<std::string> frozen = collect_frozen(inputs);

    std::vector<Delta> trimmed;
    trimmed.reserve(experts.size());
    for (const auto& e : experts) trimmed.push_back(magnitude_prune(diff(e, base), density));

    Checkpoint::ParamMap params;
    for (const auto& [name, tb] : base.params()) {
        if (frozen.count(name)) {
            params[name] = tb;
            continue;
        }
        std::vector<const Tensor*> parts;
        for (const auto& d : trimmed) parts.push_back(&d.at(name));
        Tensor out = tb;
        for (int64_t i = 0; i < out.size(); ++i) {
            double sum = 0.0;
            for (const auto* p : parts) sum += static_cast<double>(p->at(i));
            double merged = 0.0;
            if (sum != 0.0) {
                const double elected = sum > 0.0 ? 1.0 : -1.0;
                double acc = 0.0;
                int count = 0;
                for (const auto* p : parts) {
                    double v = p->at(i);
                    if (v != 0.0 && ((v > 0.0) == (elected > 0.0))) {
                        acc += v;
                        ++count;
                    }
                }
                if (count > 0) merged = acc / count;
            }
            out.at(i) = static_cast<float>(static_cast<double>(tb.at(i)) + lambda * merged);
        }
        params[name] = std::move(out);
    }
    return Checkpoint(std::move(params), base.meta());
}

TwinPreprocess twin_preprocess(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                               const std::vector<double>& gammas, int64_t rank) {
    if (rank < 1) throw ArgumentError("twin_preprocess rank must be >= 1");
    TwinPreprocess out;
    out.shared = task_arithmetic(base, experts, gammas);

    std::set<std::string> frozen;
    for (const auto& name : out.shared.frozen_names()) frozen.insert(name);

    for (size_t t = 0; t < experts.size(); ++t) {
        Delta residual = diff(experts[t], out.shared);
        if (!frozen.empty()) {
            Checkpoint::ParamMap mergeable;
            for (const auto& [name, tensor] : residual.params()) {
                if (!frozen.count(name)) mergeable[name] = tensor;
            }
            residual = Delta(std::move(mergeable));
        }
        TwinVector tv = svd_compress(residual, rank);
        tv.source_meta["shared"] = "shared";
        tv.source_meta["expert"] = "expert" + std::to_string(t);
        out.twins.push_back(std::move(tv));
    }
    return out;
}

TwinCache::TwinCache(const std::vector<TwinVector>& twins) {
    deltas_.reserve(twins.size());
    for (const auto& t : twins) deltas_.push_back(decompress(t));
}

namespace {

Checkpoint dynamic_merge_deltas(const Checkpoint& shared, const std::vector<Delta>& deltas,
                                const std::vector<double>& weights) {
    if (deltas.size() != weights.size()) {
        throw ArgumentError("dynamic_merge: " + std::to_string(deltas.size()) + " twins but " +
                            std::to_string(weights.size()) + " weights");
    }
    for (double w : weights) {
        if (!std::isfinite(w)) throw ArgumentError("dynamic_merge: non-finite weight");
    }
    for (size_t t = 1; t < deltas.size(); ++t) check_compatible(deltas[0], deltas[t]);

    Checkpoint::ParamMap params;
    for (const auto& [name, ts] : shared.params()) {
        if (deltas.empty() || !deltas[0].has(name)) {
            params[name] = ts;  // frozen or untouched tensors pass through
            continue;
        }
        std::vector<const Tensor*> parts;
        for (const auto& d : deltas) {
            const Tensor& p = d.at(name);
            if (!p.same_shape(ts)) throw CompatError("twin tensor '" + name + "' shape mismatch");
            parts.push_back(&p);
        }
        Tensor out = ts;
        for (int64_t i = 0; i < out.size(); ++i) {
            double acc = static_cast<double>(ts.at(i));
            for (size_t t = 0; t < parts.size(); ++t) {
                acc += weights[t] * static_cast<double>(parts[t]->at(i));
            }
            out.at(i) = static_cast<float>(acc);
        }
        params[name] = std::move(out);
    }
    return Checkpoint(std::move(params), shared.meta());
}

}  // namespace

Checkpoint dynamic_merge(const Checkpoint& shared, const std::vector<TwinVector>& twins,
                         const std::vector<double>& weights) {
    std::vector<Delta> deltas;
    deltas.reserve(twins.size());
    for (const auto& t : twins) deltas.push_back(decompress(t));
    return dynamic_merge_deltas(shared, deltas, weights);
}

Checkpoint dynamic_merge(const Checkpoint& shared, const TwinCache& cache,
                         const std::vector<double>& weights) {
    return dynamic_merge_deltas(shared, cache.deltas(), weights);
}

Checkpoint apply_recipe(const MergeRecipe& recipe, const Checkpoint& base,
                        const std::vector<Checkpoint>& experts) {
    if (recipe.method == MergeMethod::kTwin) {
        throw ArgumentError("twin merging is two-stage; use twin_preprocess + dynamic_merge");
    }
    std::vector<Checkpoint> inputs = experts;
    if (recipe.dare_drop_rate) {
        // Drop-and-rescale each task delta, then hand the sparsified experts
        // to the base method. Frozen tensors have all-zero deltas, so they
        // survive this bit-exactly.
        for (size_t t = 0; t < inputs.size(); ++t) {
            Delta dropped = dare_drop(diff(inputs[t], base), *recipe.dare_drop_rate,
                                      recipe.dare_seed + t);
            Checkpoint::MetaMap meta = inputs[t].meta();
            inputs[t] = axpy(base, {dropped}, {1.0});
            inputs[t].meta() = std::move(meta);
        }
    }
    switch (recipe.method) {
        case MergeMethod::kAverage:
            return weight_average(inputs);
        case MergeMethod::kTaskArithmetic: {
            if (recipe.gammas.size() != inputs.size()) {
                throw ArgumentError("task-arithmetic recipe needs one gamma per expert");
            }
            return task_arithmetic(base, inputs, recipe.gammas);
        }
        case MergeMethod::kTies:
            return ties_merge(base, inputs, recipe.ties_density, recipe.ties_lambda);
        case MergeMethod::kTwin:
            break;
    }
    throw ArgumentError("unsupported merge method");
}

}  // namespace twinforge
