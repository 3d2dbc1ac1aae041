#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "skiplab/errors.hpp"

namespace skiplab {

struct NumericError : Error {
    using Error::Error;
};

// Dense row-major tensor of doubles. Rank 1 and 2 cover everything the toy
// model needs; shape product always equals data length.
class Tensor {
  public:
    Tensor() = default;

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != data_.size())
            throw ShapeError("tensor data length does not match shape product");
    }

    static Tensor zeros(std::vector<int> shape) {
        std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<int> shape, double v) {
        std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row_vector(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(int rows, int cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    static Tensor identity(int n) {
        Tensor t = zeros({n, n});
        for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }

    int rows() const { return dim() == 2 ? shape_[0] : (dim() == 1 ? 1 : 0); }
    int cols() const { return dim() == 2 ? shape_[1] : (dim() == 1 ? shape_[0] : 0); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

    std::span<double> row(int r) {
        return {data_.data() + static_cast<std::size_t>(r) * shape_[1],
                static_cast<std::size_t>(shape_[1])};
    }
    std::span<const double> row(int r) const {
        return {data_.data() + static_cast<std::size_t>(r) * shape_[1],
                static_cast<std::size_t>(shape_[1])};
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

  private:
    static std::size_t numel_of(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

// ---- kernels -------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() + " x " + b.shape_str());
    if (a.cols() != b.rows())
        throw ShapeError("matmul inner dimensions differ: " + a.shape_str() + " x " + b.shape_str());
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = Tensor::zeros({m, n});
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = c.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = ap + static_cast<std::size_t>(i) * k;
        double* crow = cp + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = bp + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    check_finite(c, "matmul");
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.dim() != 2) throw ShapeError("transpose expects a rank-2 tensor");
    Tensor t = Tensor::zeros({a.cols(), a.rows()});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    check_finite(c, "add");
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
    check_finite(c, "scale");
    return c;
}

// Adds a length-n vector to every row of an (m x n) matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.dim() != 2 || v.dim() != 1 || v.cols() != a.cols())
        throw ShapeError("add_rowvec expects (m x n) + (n)");
    Tensor c = a;
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) c.at(i, j) += v[static_cast<std::size_t>(j)];
    check_finite(c, "add_rowvec");
    return c;
}

// Max-subtracted softmax along the given axis (0 = down columns, 1 = along
// rows). Rank-1 input treats the whole vector as one row.
inline Tensor softmax(const Tensor& x, int axis = -1) {
    if (x.dim() == 1) {
        if (x.size() == 0) throw ShapeError("softmax of empty vector");
        Tensor y = x;
        double mx = *std::max_element(y.vec().begin(), y.vec().end());
        double sum = 0.0;
        for (double& v : y.vec()) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : y.vec()) v /= sum;
        check_finite(y, "softmax");
        return y;
    }
    if (x.dim() != 2) throw ShapeError("softmax expects rank 1 or 2");
    if (axis < 0) axis = 1;
    if (axis != 0 && axis != 1) throw ShapeError("softmax axis must be 0 or 1");
    if (x.rows() == 0 || x.cols() == 0) throw ShapeError("softmax of empty axis");
    Tensor y = x;
    if (axis == 1) {
        for (int i = 0; i < y.rows(); ++i) {
            auto r = y.row(i);
            double mx = *std::max_element(r.begin(), r.end());
            double sum = 0.0;
            for (double& v : r) {
                v = std::exp(v - mx);
                sum += v;
            }
            for (double& v : r) v /= sum;
        }
    } else {
        for (int j = 0; j < y.cols(); ++j) {
            double mx = y.at(0, j);
            for (int i = 1; i < y.rows(); ++i) mx = std::max(mx, y.at(i, j));
            double sum = 0.0;
            for (int i = 0; i < y.rows(); ++i) {
                double v = std::exp(y.at(i, j) - mx);
                y.at(i, j) = v;
                sum += v;
            }
            for (int i = 0; i < y.rows(); ++i) y.at(i, j) /= sum;
        }
    }
    check_finite(y, "softmax");
    return y;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double l2_norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

// Cosine similarity clamped to [-1, 1]. Near-zero norms (< 1e-12) have no
// meaningful direction and return 0; that value can never clear a skip
// threshold like 0.95. Identical and exactly-negated inputs return +/-1
// exactly — a bypassed block must score 1.0, not 1 - ulp.
inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("cosine length mismatch");
    constexpr double kEps = 1e-12;
    double nu = l2_norm(u), nv = l2_norm(v);
    if (nu < kEps || nv < kEps) return 0.0;
    bool same = true, negated = true;
    for (std::size_t i = 0; i < u.size() && (same || negated); ++i) {
        same = same && u[i] == v[i];
        negated = negated && u[i] == -v[i];
    }
    if (same) return 1.0;
    if (negated) return -1.0;
    double c = dot(u, v) / (nu * nv);
    return std::clamp(c, -1.0, 1.0);
}

inline double cosine(const Tensor& u, const Tensor& v) {
    return cosine(std::span<const double>(u.data(), u.size()),
                  std::span<const double>(v.data(), v.size()));
}

// log(sum(exp(row))) with max subtraction.
inline double log_sum_exp(std::span<const double> row) {
    double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    return mx + std::log(sum);
}

// Mean negative log-likelihood over positions selected by mask.
// logits: (n x V), targets/mask: length n.
inline double cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask) {
    if (logits.dim() != 2) throw ShapeError("cross_entropy expects rank-2 logits");
    const int n = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("cross_entropy targets/mask length mismatch");
    double total = 0.0;
    int count = 0;
    for (int i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= V)
            throw InputError("cross_entropy target id out of vocabulary range");
        auto row = logits.row(i);
        total += log_sum_exp(row) - row[targets[i]];
        ++count;
    }
    if (count == 0) throw DegenerateBatchError("cross_entropy mask selects no position");
    return total / count;
}

inline double gelu_scalar(double x) {
    // tanh approximation
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
    const double c = 0.7978845608028654;
    double x3 = x * x * x;
    double t = std::tanh(c * (x + 0.044715 * x3));
    double dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * dt;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace skiplab
