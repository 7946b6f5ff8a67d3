#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace twinforge {

// Dense row-major float32 tensor of rank 1 or 2.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int64_t> shape);

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t rows() const;
    int64_t cols() const;

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    float& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    float at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    bool finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

// Thin SVD factors of a 2-D tensor: u (d_out x r), s (r, descending,
// non-negative), v (d_in x r), with u diag(s) v^T reconstructing the input.
struct SvdFactors {
    Tensor u;
    Tensor s;
    Tensor v;
    std::array<int64_t, 2> original_shape{0, 0};

    int64_t rank() const { return s.size(); }
};

SvdFactors svd(const Tensor& m);
SvdFactors truncate(const SvdFactors& f, int64_t r);
Tensor reconstruct(const SvdFactors& f);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float k);

// a (m x k) times b (k x n); entries accumulated in double.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

double frobenius_norm(const Tensor& a);
// ||a - b||_F / max(||b||_F, floor); used throughout the tests.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace twinforge
