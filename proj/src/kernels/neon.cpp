#if defined(__aarch64__)
#include <arm_neon.h>

#include <cmath>

#include "tc/kernels.hpp"

namespace tc::kernels::detail {
namespace {

float dot_neon(const float* a, const float* b, std::size_t n) {
    float32x4_t acc0 = vdupq_n_f32(0.0f), acc1 = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
        acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
    }
    float acc = vaddvq_f32(vaddq_f32(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64_neon(const float* a, const float* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0), acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const float32x4_t va = vld1q_f32(a + i);
        const float32x4_t vb = vld1q_f32(b + i);
        acc0 = vfmaq_f64(acc0, vcvt_f64_f32(vget_low_f32(va)), vcvt_f64_f32(vget_low_f32(vb)));
        acc1 = vfmaq_f64(acc1, vcvt_high_f64_f32(va), vcvt_high_f64_f32(vb));
    }
    double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void axpy_neon(float alpha, const float* x, float* y, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(float alpha, float* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(x + i, vmulq_n_f32(vld1q_f32(x + i), alpha));
    for (; i < n; ++i) x[i] *= alpha;
}

void gemv_neon(const float* a, std::size_t rows, std::size_t cols, const float* x, float* y) {
    for (std::size_t r = 0; r < rows; ++r) y[r] = dot_neon(a + r * cols, x, cols);
}

void relu_neon(float* x, std::size_t n) {
    const float32x4_t zero = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(x + i, vmaxq_f32(vld1q_f32(x + i), zero));
    for (; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void adam_neon(float* p, const float* g, float* m, float* v, std::size_t n, const AdamParams& hp) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const float32x4_t vg = vld1q_f32(g + i);
        const float32x4_t vm = vaddq_f32(vmulq_n_f32(vld1q_f32(m + i), hp.beta1), vmulq_n_f32(vg, 1.0f - hp.beta1));
        const float32x4_t vv =
            vaddq_f32(vmulq_n_f32(vld1q_f32(v + i), hp.beta2), vmulq_f32(vmulq_n_f32(vg, 1.0f - hp.beta2), vg));
        vst1q_f32(m + i, vm);
        vst1q_f32(v + i, vv);
        const float32x4_t mhat = vdivq_f32(vm, vdupq_n_f32(hp.bias_correction1));
        const float32x4_t vhat = vdivq_f32(vv, vdupq_n_f32(hp.bias_correction2));
        const float32x4_t step =
            vdivq_f32(vmulq_n_f32(mhat, hp.lr), vaddq_f32(vsqrtq_f32(vhat), vdupq_n_f32(hp.eps)));
        vst1q_f32(p + i, vsubq_f32(vld1q_f32(p + i), step));
    }
    for (; i < n; ++i) {
        m[i] = hp.beta1 * m[i] + (1.0f - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0f - hp.beta2) * g[i] * g[i];
        p[i] -= hp.lr * (m[i] / hp.bias_correction1) / (std::sqrt(v[i] / hp.bias_correction2) + hp.eps);
    }
}

} // namespace

extern const Table kNeon;
const Table kNeon{Isa::neon, dot_neon,  dot_f64_neon, axpy_neon,
                  scale_neon, gemv_neon, relu_neon,    adam_neon};

} // namespace tc::kernels::detail
#endif
