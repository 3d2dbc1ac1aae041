#pragma once

// Shared test-only oracles. Everything here recomputes results through an
// independent route from the library code it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "skiplab/model.hpp"
#include "skiplab/rng.hpp"
#include "skiplab/tensor.hpp"

namespace testutil {

// Elementwise triple-loop reference product.
inline skiplab::Tensor matmul_oracle(const skiplab::Tensor& a, const skiplab::Tensor& b) {
    skiplab::Tensor c = skiplab::Tensor::zeros({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

inline skiplab::Tensor random_tensor(std::vector<int> shape, skiplab::SeededRng& rng,
                                     double scale = 1.0) {
    skiplab::Tensor t = skiplab::Tensor::zeros(std::move(shape));
    for (double& v : t.vec()) v = scale * rng.normal();
    return t;
}

// Central-difference gradient of a scalar function of one checkpoint
// parameter entry.
inline double finite_diff(skiplab::Checkpoint& ckpt, const std::string& name, std::size_t idx,
                          const std::function<double()>& loss, double h = 1e-5) {
    skiplab::Tensor& p = ckpt.params.at(name);
    const double saved = p[idx];
    p[idx] = saved + h;
    double up = loss();
    p[idx] = saved - h;
    double down = loss();
    p[idx] = saved;
    return (up - down) / (2.0 * h);
}

// Relative error with a floor so near-zero gradients compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-2) {
    return std::fabs(a - b) / std::max({floor, std::fabs(a), std::fabs(b)});
}

}  // namespace testutil
