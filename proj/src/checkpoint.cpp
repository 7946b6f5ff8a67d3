#include "twinforge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "twinforge/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace twinforge {

using nlohmann::json;

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw CompatError("no tensor named '" + name + "'");
    return it->second;
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(name);
    return out;
}

int64_t Checkpoint::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

std::vector<std::string> Checkpoint::frozen_names() const {
    std::vector<std::string> out;
    auto it = meta_.find("frozen");
    if (it == meta_.end()) return out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool Checkpoint::is_frozen(const std::string& name) const {
    for (const auto& n : frozen_names()) {
        if (n == name) return true;
    }
    return false;
}

void Checkpoint::validate_finite() const {
    for (const auto& [name, t] : params_) {
        if (!t.finite()) throw NumericError("tensor '" + name + "' contains non-finite values");
    }
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    c.validate_finite();

    json header = json::object();
    if (!c.meta().empty()) {
        json meta = json::object();
        for (const auto& [k, v] : c.meta()) meta[k] = v;
        header["__metadata__"] = meta;
    }
    uint64_t offset = 0;
    for (const auto& [name, t] : c.params()) {  // lexicographic, contiguous
        uint64_t bytes = static_cast<uint64_t>(t.size()) * 4;
        header[name] = {{"dtype", "F32"},
                        {"shape", t.shape()},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    uint64_t n = header_str.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : c.params()) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * 4));
    }
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    const uint64_t file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);

    if (file_size < 8) throw FormatError("file too short for header length");
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (header_len > file_size - 8) {
        throw FormatError("declared header length " + std::to_string(header_len) +
                          " exceeds file size");
    }
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed JSON header: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("header is not a JSON object");

    const uint64_t payload_size = file_size - 8 - header_len;
    const uint64_t payload_start = 8 + header_len;

    Checkpoint::MetaMap meta;
    struct Entry {
        std::string name;
        std::vector<int64_t> shape;
        uint64_t begin, end;
    };
    std::vector<Entry> entries;

    for (const auto& [key, val] : header.items()) {
        if (key == "__metadata__") {
            if (!val.is_object()) throw FormatError("__metadata__ must be an object");
            for (const auto& [k, v] : val.items()) {
                if (!v.is_string()) throw FormatError("__metadata__ values must be strings");
                meta[k] = v.get<std::string>();
            }
            continue;
        }
        if (!val.is_object() || !val.contains("dtype") || !val.contains("shape") ||
            !val.contains("data_offsets")) {
            throw FormatError("tensor entry '" + key + "' is malformed");
        }
        if (val["dtype"].get<std::string>() != "F32") {
            throw FormatError("tensor '" + key + "': unsupported dtype " +
                              val["dtype"].get<std::string>());
        }
        Entry e;
        e.name = key;
        e.shape = val["shape"].get<std::vector<int64_t>>();
        auto offs = val["data_offsets"].get<std::vector<uint64_t>>();
        if (offs.size() != 2) throw FormatError("tensor '" + key + "': data_offsets must be a pair");
        e.begin = offs[0];
        e.end = offs[1];
        if (e.shape.empty() || e.shape.size() > 2) {
            throw FormatError("tensor '" + key + "': rank must be 1 or 2");
        }
        uint64_t count = 1;
        for (int64_t d : e.shape) {
            if (d <= 0) throw FormatError("tensor '" + key + "': non-positive dimension");
            count *= static_cast<uint64_t>(d);
        }
        if (e.end < e.begin || e.end - e.begin != count * 4) {
            throw FormatError("tensor '" + key + "': offsets disagree with shape");
        }
        if (e.end > payload_size) {
            throw FormatError("tensor '" + key + "': offsets extend past end of file");
        }
        entries.push_back(std::move(e));
    }

    // Overlap check over byte ranges.
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    ranges.reserve(entries.size());
    for (const auto& e : entries) ranges.emplace_back(e.begin, e.end);
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second) {
            throw FormatError("tensor data ranges overlap");
        }
    }

    Checkpoint::ParamMap params;
    for (const auto& e : entries) {
        std::vector<float> data((e.end - e.begin) / 4);
        in.seekg(static_cast<std::streamoff>(payload_start + e.begin));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(e.end - e.begin));
        if (!in) throw IoError("short read for tensor '" + e.name + "'");
        params[e.name] = Tensor(e.shape, std::move(data));
    }

    Checkpoint c(std::move(params), std::move(meta));
    c.validate_finite();
    return c;
}

void check_compatible(const Checkpoint& a, const Checkpoint& b) {
    if (a.tensor_count() != b.tensor_count()) {
        throw CompatError("checkpoints have different tensor counts (" +
                          std::to_string(a.tensor_count()) + " vs " +
                          std::to_string(b.tensor_count()) + ")");
    }
    auto ia = a.params().begin();
    auto ib = b.params().begin();
    for (; ia != a.params().end(); ++ia, ++ib) {
        if (ia->first != ib->first) {
            throw CompatError("tensor name mismatch: '" + ia->first + "' vs '" + ib->first + "'");
        }
        if (!ia->second.same_shape(ib->second)) {
            throw CompatError("tensor '" + ia->first + "' has mismatched shapes");
        }
    }
}

Delta diff(const Checkpoint& a, const Checkpoint& b) {
    check_compatible(a, b);
    Checkpoint::ParamMap params;
    for (const auto& [name, ta] : a.params()) {
        params[name] = sub(ta, b.at(name));
    }
    return Delta(std::move(params));
}

Checkpoint axpy(const Checkpoint& base, const std::vector<Delta>& deltas,
                const std::vector<double>& coeffs) {
    if (deltas.size() != coeffs.size()) {
        throw ArgumentError("axpy: " + std::to_string(deltas.size()) + " deltas but " +
                            std::to_string(coeffs.size()) + " coefficients");
    }
    for (const auto& d : deltas) check_compatible(base, d);

    Checkpoint::ParamMap params;
    for (const auto& [name, tb] : base.params()) {
        std::vector<const Tensor*> parts;
        parts.reserve(deltas.size());
        for (const auto& d : deltas) parts.push_back(&d.at(name));
        Tensor out = tb;
        for (int64_t i = 0; i < out.size(); ++i) {
            double acc = static_cast<double>(tb.at(i));
            for (size_t t = 0; t < parts.size(); ++t) {
                acc += coeffs[t] * static_cast<double>(parts[t]->at(i));
            }
            out.at(i) = static_cast<float>(acc);
        }
        params[name] = std::move(out);
    }
    return Checkpoint(std::move(params), base.meta());
}

}  // namespace twinforge
