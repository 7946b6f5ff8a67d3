#include "twinforge/linalg.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdlib>
#include <string>

#include "twinforge/errors.hpp"

namespace twinforge {

namespace {

int64_t shape_product(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

void require_2d(const Tensor& m, const char* op) {
    if (m.rank() != 2) {
        throw ShapeError(std::string(op) + " requires a 2-D tensor, got rank " +
                         std::to_string(m.rank()));
    }
}

void require_finite(const Tensor& m, const char* op) {
    if (!m.finite()) {
        throw NumericError(std::string(op) + ": input contains non-finite entries");
    }
}

Eigen::MatrixXd to_eigen(const Tensor& m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (int64_t r = 0; r < m.rows(); ++r)
        for (int64_t c = 0; c < m.cols(); ++c) out(r, c) = m.at(r, c);
    return out;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty() || shape_.size() > 2) {
        throw ShapeError("tensor rank must be 1 or 2, got " + std::to_string(shape_.size()));
    }
    for (int64_t d : shape_) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
    }
    if (shape_product(shape_) != static_cast<int64_t>(data_.size())) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape product " + std::to_string(shape_product(shape_)));
    }
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
    int64_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
}

int64_t Tensor::rows() const {
    if (shape_.empty()) throw ShapeError("rows() on empty tensor");
    return shape_[0];
}

int64_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeError("cols() requires a 2-D tensor");
    return shape_[1];
}

bool Tensor::finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

SvdFactors svd(const Tensor& m) {
    require_2d(m, "svd");
    require_finite(m, "svd");

    const int64_t d_out = m.rows();
    const int64_t d_in = m.cols();
    const int64_t r = std::min(d_out, d_in);

    Eigen::JacobiSVD<Eigen::MatrixXd> dec(to_eigen(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::MatrixXd u = dec.matrixU();
    Eigen::MatrixXd v = dec.matrixV();
    Eigen::VectorXd s = dec.singularValues();

    // Deterministic sign convention: the largest-magnitude entry of each left
    // singular vector is made non-negative (v flips with u).
    for (int64_t c = 0; c < r; ++c) {
        int64_t imax = 0;
        double amax = -1.0;
        for (int64_t i = 0; i < d_out; ++i) {
            double a = std::abs(u(i, c));
            if (a > amax) {
                amax = a;
                imax = i;
            }
        }
        if (u(imax, c) < 0.0) {
            u.col(c) = -u.col(c);
            v.col(c) = -v.col(c);
        }
    }

    SvdFactors f;
    f.original_shape = {d_out, d_in};
    std::vector<float> ud(static_cast<size_t>(d_out * r));
    std::vector<float> vd(static_cast<size_t>(d_in * r));
    std::vector<float> sd(static_cast<size_t>(r));
    for (int64_t i = 0; i < d_out; ++i)
        for (int64_t c = 0; c < r; ++c) ud[static_cast<size_t>(i * r + c)] = static_cast<float>(u(i, c));
    for (int64_t i = 0; i < d_in; ++i)
        for (int64_t c = 0; c < r; ++c) vd[static_cast<size_t>(i * r + c)] = static_cast<float>(v(i, c));
    for (int64_t c = 0; c < r; ++c) sd[static_cast<size_t>(c)] = static_cast<float>(s(c));
    f.u = Tensor({d_out, r}, std::move(ud));
    f.s = Tensor({r}, std::move(sd));
    f.v = Tensor({d_in, r}, std::move(vd));
    return f;
}

SvdFactors truncate(const SvdFactors& f, int64_t r) {
    const int64_t full = f.rank();
    if (r < 1 || r > full) {
        throw ArgumentError("truncate rank " + std::to_string(r) + " out of range [1, " +
                            std::to_string(full) + "]");
    }
    SvdFactors out;
    out.original_shape = f.original_shape;
    const int64_t d_out = f.u.rows();
    const int64_t d_in = f.v.rows();
    std::vector<float> ud(static_cast<size_t>(d_out * r));
    std::vector<float> vd(static_cast<size_t>(d_in * r));
    std::vector<float> sd(static_cast<size_t>(r));
    for (int64_t i = 0; i < d_out; ++i)
        for (int64_t c = 0; c < r; ++c) ud[static_cast<size_t>(i * r + c)] = f.u.at(i, c);
    for (int64_t i = 0; i < d_in; ++i)
        for (int64_t c = 0; c < r; ++c) vd[static_cast<size_t>(i * r + c)] = f.v.at(i, c);
    for (int64_t c = 0; c < r; ++c) sd[static_cast<size_t>(c)] = f.s.at(c);
    out.u = Tensor({d_out, r}, std::move(ud));
    out.s = Tensor({r}, std::move(sd));
    out.v = Tensor({d_in, r}, std::move(vd));
    return out;
}

Tensor reconstruct(const SvdFactors& f) {
    const int64_t d_out = f.u.rows();
    const int64_t d_in = f.v.rows();
    const int64_t r = f.rank();
    Tensor out = Tensor::zeros({d_out, d_in});
    for (int64_t i = 0; i < d_out; ++i) {
        for (int64_t j = 0; j < d_in; ++j) {
            double acc = 0.0;
            for (int64_t c = 0; c < r; ++c) {
                acc += static_cast<double>(f.u.at(i, c)) * static_cast<double>(f.s.at(c)) *
                       static_cast<double>(f.v.at(j, c));
            }
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) - b.at(i);
    return out;
}

Tensor scale(const Tensor& a, float k) {
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * k;
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()) + " differ");
    }
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t) {
                acc += static_cast<double>(a.at(i, t)) * static_cast<double>(b.at(t, j));
            }
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    Tensor out = Tensor::zeros({a.cols(), a.rows()});
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

double frobenius_norm(const Tensor& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double v = a.at(i);
        acc += v * v;
    }
    return std::sqrt(acc);
}

double relative_error(const Tensor& a, const Tensor& b) {
    double denom = frobenius_norm(b);
    return frobenius_norm(sub(a, b)) / std::max(denom, 1e-30);
}

}  // namespace twinforge
