#pragma once

// Small dense-vector helpers shared across modules. Storage is float32;
// reductions accumulate in double.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace dms {

inline double dot_f64(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("dot: dimension mismatch");
    }
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

inline double norm_l2(std::span<const float> a) {
    double acc = 0.0;
    for (float x : a) {
        acc += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(acc);
}

inline void axpy(float alpha, std::span<const float> x, std::span<float> y) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("axpy: dimension mismatch");
    }
    for (size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

inline std::vector<float> mean_rows(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) {
        throw std::invalid_argument("mean_rows: empty input");
    }
    const size_t dim = rows.front().size();
    std::vector<double> acc(dim, 0.0);
    for (const auto& row : rows) {
        if (row.size() != dim) {
            throw std::invalid_argument("mean_rows: ragged input");
        }
        for (size_t i = 0; i < dim; ++i) {
            acc[i] += row[i];
        }
    }
    std::vector<float> out(dim);
    for (size_t i = 0; i < dim; ++i) {
        out[i] = static_cast<float>(acc[i] / static_cast<double>(rows.size()));
    }
    return out;
}

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace dms
