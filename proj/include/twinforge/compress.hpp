#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>

#include "twinforge/checkpoint.hpp"
#include "twinforge/linalg.hpp"

namespace twinforge {

// Compressed exclusive-knowledge vector: rank-r factors for matrices,
// dense storage for 1-D tensors.
struct TwinVector {
    using Entry = std::variant<SvdFactors, Tensor>;

    std::map<std::string, Entry> entries;
    int64_t rank = 0;  // requested rank; per-tensor factors may be clamped lower
    std::map<std::string, std::string> source_meta;

    // r * (d_out + d_in + 1) per factored matrix, n per dense vector.
    int64_t param_count() const;
};

// Keeps the ceil(density * n) largest-|value| entries per tensor, zeroes the
// rest. Ties keep the lower flat index. No rescaling.
Delta magnitude_prune(const Delta& d, double density);

// Drops each entry independently with probability `drop_rate` and divides
// survivors by (1 - drop_rate). Per-tensor substreams are derived from the
// tensor name so results do not depend on iteration or thread order.
Delta dare_drop(const Delta& d, double drop_rate, uint64_t seed);

// 2-D tensors become rank-r factors (r clamped per tensor to min(d_out, d_in));
// 1-D tensors are stored dense, unchanged.
TwinVector svd_compress(const Delta& d, int64_t rank);

Delta decompress(const TwinVector& t);

// Same container as checkpoints: factors under "<name>.u/.s/.v", dense
// vectors under their own name, metadata "kind"="twin" and "rank".
TwinVector load_twin(const std::filesystem::path& path);
void save_twin(const TwinVector& t, const std::filesystem::path& path);

// ceil(frac * n) without spurious carries from binary representation of frac.
int64_t ceil_fraction(double frac, int64_t n);

}  // namespace twinforge
