#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "twinforge/linalg.hpp"

namespace twinforge {

// Named map of tensors plus free-form string metadata. Iteration order is
// lexicographic by name. Treated as immutable once fully constructed.
class Checkpoint {
public:
    using ParamMap = std::map<std::string, Tensor>;
    using MetaMap = std::map<std::string, std::string>;

    Checkpoint() = default;
    explicit Checkpoint(ParamMap params, MetaMap meta = {})
        : params_(std::move(params)), meta_(std::move(meta)) {}

    const ParamMap& params() const { return params_; }
    const MetaMap& meta() const { return meta_; }
    MetaMap& meta() { return meta_; }

    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }

    std::vector<std::string> names() const;
    size_t tensor_count() const { return params_.size(); }
    int64_t param_count() const;

    // Names listed in meta["frozen"] (comma-separated).
    std::vector<std::string> frozen_names() const;
    bool is_frozen(const std::string& name) const;

    // Throws NumericError if any tensor contains a non-finite value.
    void validate_finite() const;

private:
    ParamMap params_;
    MetaMap meta_;
};

// A Delta has the same structure as a Checkpoint; it holds per-tensor
// differences rather than weights.
using Delta = Checkpoint;

// Binary container: 8-byte little-endian header length, UTF-8 JSON header
// mapping tensor names to {dtype, shape, data_offsets}, then the raw f32
// payload with tensors contiguous in lexicographic name order.
Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);

// Throws CompatError unless name sets and per-name shapes match.
void check_compatible(const Checkpoint& a, const Checkpoint& b);

Delta diff(const Checkpoint& a, const Checkpoint& b);

// base + sum_t coeffs[t] * deltas[t], accumulated per element in double and
// rounded to f32 once at the end.
Checkpoint axpy(const Checkpoint& base, const std::vector<Delta>& deltas,
                const std::vector<double>& coeffs);

}  // namespace twinforge
