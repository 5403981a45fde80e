#include <cmath>

#include "tc/kernels.hpp"

namespace tc::kernels {
namespace {

float dot_scalar(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64_scalar(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void axpy_scalar(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(float alpha, float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void gemv_scalar(const float* a, std::size_t rows, std::size_t cols, const float* x, float* y) {
    for (std::size_t r = 0; r < rows; ++r) y[r] = dot_scalar(a + r * cols, x, cols);
}

void relu_scalar(float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void adam_scalar(float* p, const float* g, float* m, float* v, std::size_t n, const AdamParams& hp) {
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = hp.beta1 * m[i] + (1.0f - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0f - hp.beta2) * g[i] * g[i];
        const float mhat = m[i] / hp.bias_correction1;
        const float vhat = v[i] / hp.bias_correction2;
        p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
}

constexpr Table kScalar{Isa::scalar,    dot_scalar,  dot_f64_scalar, axpy_scalar,
                        scale_scalar,   gemv_scalar, relu_scalar,    adam_scalar};

} // namespace

const Table& scalar_table() { return kScalar; }

} // namespace tc::kernels
