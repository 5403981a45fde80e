#pragma once

// Data-parallel inner loops. Every kernel has a scalar reference
// implementation; AVX2+FMA (x86-64) and NEON (aarch64) variants are selected
// at runtime. Set TC_SIMD=scalar to force the reference path.

#include <cstddef>
#include <span>
#include <string_view>

#include "tc/tensor.hpp"

namespace tc::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

struct AdamParams {
    float lr;
    float beta1;
    float beta2;
    float eps;
    float bias_correction1; // 1 - beta1^t
    float bias_correction2; // 1 - beta2^t
};

struct Table {
    Isa isa;
    // sum_i a[i]*b[i], float accumulator
    float (*dot)(const float* a, const float* b, std::size_t n);
    // sum_i a[i]*b[i], double accumulator
    double (*dot_f64)(const float* a, const float* b, std::size_t n);
    // y += alpha * x
    void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
    // x *= alpha
    void (*scale)(float alpha, float* x, std::size_t n);
    // y[r] = A[r,:] . x  for a row-major rows x cols matrix
    void (*gemv)(const float* a, std::size_t rows, std::size_t cols, const float* x, float* y);
    // x = max(x, 0)
    void (*relu)(float* x, std::size_t n);
    // one Adam update over n parameters
    void (*adam)(float* param, const float* grad, float* m, float* v, std::size_t n, const AdamParams& hp);
};

const Table& scalar_table();
// nullptr when the variant was not compiled in or the CPU lacks the ISA
const Table* avx2_table();
const Table* neon_table();

// Table chosen once per process.
const Table& active();

inline float dot(std::span<const float> a, std::span<const float> b) {
    return active().dot(a.data(), b.data(), a.size());
}
inline double dot_f64(std::span<const float> a, std::span<const float> b) {
    return active().dot_f64(a.data(), b.data(), a.size());
}
inline void axpy(float alpha, std::span<const float> x, std::span<float> y) {
    active().axpy(alpha, x.data(), y.data(), x.size());
}
inline void scale(float alpha, std::span<float> x) { active().scale(alpha, x.data(), x.size()); }
inline void relu(std::span<float> x) { active().relu(x.data(), x.size()); }

// y = A x
void gemv(const Matrix& a, std::span<const float> x, std::span<float> y);
// y += A^T x
void gemv_t_acc(const Matrix& a, std::span<const float> x, std::span<float> y);

} // namespace tc::kernels
