#include "twinforge/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twinforge/errors.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

int64_t ceil_fraction(double frac, int64_t n) {
    double x = frac * static_cast<double>(n);
    // Nudge below any representation carry before taking the ceiling, so
    // e.g. 0.1 * 100 stays 10 rather than becoming 11.
    double nudged = x - 1e-9 * std::max(1.0, std::abs(x));
    return static_cast<int64_t>(std::ceil(nudged));
}

int64_t TwinVector::param_count() const {
    int64_t n = 0;
    for (const auto& [name, entry] : entries) {
        if (std::holds_alternative<SvdFactors>(entry)) {
            const auto& f = std::get<SvdFactors>(entry);
            n += f.rank() * (f.original_shape[0] + f.original_shape[1] + 1);
        } else {
            n += std::get<Tensor>(entry).size();
        }
    }
    return n;
}

Delta magnitude_prune(const Delta& d, double density) {
    if (!(density > 0.0 && density <= 1.0)) {
        throw ArgumentError("magnitude_prune density must be in (0, 1], got " +
                            std::to_string(density));
    }
    Checkpoint::ParamMap params;
    for (const auto& [name, t] : d.params()) {
        const int64_t n = t.size();
        const int64_t keep = std::min<int64_t>(n, ceil_fraction(density, n));
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        // Larger magnitude first; equal magnitudes keep the lower flat index.
        std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
            return std::abs(t.at(a)) > std::abs(t.at(b));
        });
        Tensor out = Tensor::zeros(t.shape());
        for (int64_t i = 0; i < keep; ++i) out.at(idx[static_cast<size_t>(i)]) = t.at(idx[static_cast<size_t>(i)]);
        params[name] = std::move(out);
    }
    return Delta(std::move(params), d.meta());
}

Delta dare_drop(const Delta& d, double drop_rate, uint64_t seed) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ArgumentError("dare_drop rate must be in [0, 1), got " + std::to_string(drop_rate));
    }
    const float rescale = static_cast<float>(1.0 - drop_rate);
    Checkpoint::ParamMap params;
    Rng root(seed);
    for (const auto& [name, t] : d.params()) {
        Rng stream = root.fork(name);
        Tensor out = t;
        for (int64_t i = 0; i < out.size(); ++i) {
            if (stream.uniform() < drop_rate) {
                out.at(i) = 0.0f;
            } else {
                out.at(i) = t.at(i) / rescale;
            }
        }
        params[name] = std::move(out);
    }
    return Delta(std::move(params), d.meta());
}

TwinVector svd_compress(const Delta& d, int64_t rank) {
    if (rank < 1) throw ArgumentError("svd_compress rank must be >= 1");
    TwinVector out;
    out.rank = rank;
    for (const auto& [name, t] : d.params()) {
        if (t.rank() == 1) {
            out.entries[name] = t;
            continue;
        }
        SvdFactors full = svd(t);
        int64_t r = std::min(rank, full.rank());
        out.entries[name] = truncate(full, r);
    }
    return out;
}

Delta decompress(const TwinVector& t) {
    Checkpoint::ParamMap params;
    for (const auto& [name, entry] : t.entries) {
        if (std::holds_alternative<SvdFactors>(entry)) {
            params[name] = reconstruct(std::get<SvdFactors>(entry));
        } else {
            params[name] = std::get<Tensor>(entry);
        }
    }
    return Delta(std::move(params));
}

void save_twin(const TwinVector& t, const std::filesystem::path& path) {
    Checkpoint::ParamMap params;
    for (const auto& [name, entry] : t.entries) {
        if (std::holds_alternative<SvdFactors>(entry)) {
            const auto& f = std::get<SvdFactors>(entry);
            params[name + ".u"] = f.u;
            params[name + ".s"] = f.s;
            params[name + ".v"] = f.v;
        } else {
            params[name] = std::get<Tensor>(entry);
        }
    }
    Checkpoint::MetaMap meta = t.source_meta;
    meta["kind"] = "twin";
    meta["rank"] = std::to_string(t.rank);
    save_checkpoint(Checkpoint(std::move(params), std::move(meta)), path);
}

TwinVector load_twin(const std::filesystem::path& path) {
    Checkpoint c = load_checkpoint(path);
    auto kind = c.meta().find("kind");
    if (kind == c.meta().end() || kind->second != "twin") {
        throw FormatError("'" + path.string() + "' is not a twin-vector file");
    }
    auto rank_it = c.meta().find("rank");
    if (rank_it == c.meta().end()) throw FormatError("twin-vector file missing rank metadata");

    TwinVector out;
    out.rank = std::stoll(rank_it->second);
    for (const auto& [k, v] : c.meta()) {
        if (k != "kind" && k != "rank") out.source_meta[k] = v;
    }
    auto ends_with = [](const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (const auto& [name, tensor] : c.params()) {
        if (ends_with(name, ".u")) {
            std::string stem = name.substr(0, name.size() - 2);
            if (!c.has(stem + ".s") || !c.has(stem + ".v")) {
                throw FormatError("twin factor '" + stem + "' is incomplete");
            }
            SvdFactors f;
            f.u = c.at(stem + ".u");
            f.s = c.at(stem + ".s");
            f.v = c.at(stem + ".v");
            f.original_shape = {f.u.rows(), f.v.rows()};
            if (f.u.cols() != f.s.size() || f.v.cols() != f.s.size()) {
                throw FormatError("twin factor '" + stem + "' has inconsistent ranks");
            }
            out.entries[stem] = std::move(f);
        } else if ((ends_with(name, ".s") || ends_with(name, ".v")) &&
                   c.has(name.substr(0, name.size() - 2) + ".u")) {
            continue;  // grouped with the matching ".u"
        } else {
            out.entries[name] = tensor;
        }
    }
    return out;
}

}  // namespace twinforge
