#pragma once

// Internal dense kernels for the transformer. Matrix-product inner loops
// accumulate in float32 (vectorized via omp simd, fixed lane order for a
// given binary); softmax and normalization statistics accumulate in double.

#include <cmath>
#include <cstddef>

namespace dms::kern {

inline float dot(const float* a, const float* b, int n) {
    float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline void axpy(float alpha, const float* x, float* y, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

// y = W x + b, W row-major [out, in], b may be null.
inline void matvec(const float* W, const float* x, const float* b, float* y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        y[o] = dot(W + static_cast<size_t>(o) * in, x, in) + (b ? b[o] : 0.0f);
    }
}

// dx += W^T dy.
inline void matvec_t_acc(const float* W, const float* dy, float* dx, int out, int in) {
    for (int o = 0; o < out; ++o) {
        axpy(dy[o], W + static_cast<size_t>(o) * in, dx, in);
    }
}

// dW += dy x^T (outer product accumulate).
inline void ger_acc(const float* dy, const float* x, float* dW, int out, int in) {
    for (int o = 0; o < out; ++o) {
        axpy(dy[o], x, dW + static_cast<size_t>(o) * in, in);
    }
}

// Y[t,o] = dot(W[o,:], X[t,:]) + b[o] for all positions; W streamed once.
inline void matmul(const float* W, const float* X, const float* b, float* Y, int T, int out,
                   int in) {
    for (int o = 0; o < out; ++o) {
        const float* row = W + static_cast<size_t>(o) * in;
        const float bias = b ? b[o] : 0.0f;
        for (int t = 0; t < T; ++t) {
            Y[static_cast<size_t>(t) * out + o] = dot(row, X + static_cast<size_t>(t) * in, in) + bias;
        }
    }
}

// dW[o,i] += sum_t dY[t,o] * X[t,i]; each dW row stays cache-hot across t.
inline void matmul_at_acc(const float* dY, const float* X, float* dW, int T, int out, int in) {
    for (int o = 0; o < out; ++o) {
        float* row = dW + static_cast<size_t>(o) * in;
        for (int t = 0; t < T; ++t) {
            const float a = dY[static_cast<size_t>(t) * out + o];
            if (a != 0.0f) {
                axpy(a, X + static_cast<size_t>(t) * in, row, in);
            }
        }
    }
}

// dX[t,:] += sum_o dY[t,o] * W[o,:].
inline void matmul_t_acc(const float* W, const float* dY, float* dX, int T, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const float* row = W + static_cast<size_t>(o) * in;
        for (int t = 0; t < T; ++t) {
            const float a = dY[static_cast<size_t>(t) * out + o];
            if (a != 0.0f) {
                axpy(a, row, dX + static_cast<size_t>(t) * in, in);
            }
        }
    }
}

// db[o] += sum_t dY[t,o].
inline void bias_acc(const float* dY, float* db, int T, int out) {
    for (int t = 0; t < T; ++t) {
        for (int o = 0; o < out; ++o) {
            db[o] += dY[static_cast<size_t>(t) * out + o];
        }
    }
}

struct LnStats {
    double mean;
    double rstd;
};

inline LnStats layernorm_forward(const float* x, const float* gain, const float* bias, float* y,
                                 int n, double eps = 1e-5) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) {
        mean += x[i];
    }
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) {
        y[i] = static_cast<float>((x[i] - mean) * rstd) * gain[i] + bias[i];
    }
    return {mean, rstd};
}

inline void layernorm_backward(const float* x, const float* gain, const float* dy, LnStats stats,
                               float* dx_acc, float* dgain_acc, float* dbias_acc, int n) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
        const double xhat = (x[i] - stats.mean) * stats.rstd;
        const double dxhat = static_cast<double>(dy[i]) * gain[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for (int i = 0; i < n; ++i) {
        const double xhat = (x[i] - stats.mean) * stats.rstd;
        const double dxhat = static_cast<double>(dy[i]) * gain[i];
        dx_acc[i] += static_cast<float>((dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * stats.rstd);
        dgain_acc[i] += dy[i] * static_cast<float>(xhat);
        dbias_acc[i] += dy[i];
    }
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

// Pade(7,6) tanh, clamped where it saturates; |error| < 1.2e-4, error < 1e-6
// for |x| < 3. Branch-free and vectorizable, unlike libm tanh.
inline float fast_tanh(float x) {
    const float c = std::min(4.97f, std::max(-4.97f, x));
    const float x2 = c * c;
    const float p = c * (135135.0f + x2 * (17325.0f + x2 * (378.0f + x2)));
    const float q = 135135.0f + x2 * (62370.0f + x2 * (3150.0f + x2 * 28.0f));
    return std::min(1.0f, std::max(-1.0f, p / q));
}

inline float gelu(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5f * x * (1.0f + fast_tanh(u));
}

inline float gelu_grad(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    const float t = fast_tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

}  // namespace dms::kern
