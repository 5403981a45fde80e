#include <cstdlib>
#include <string>

#include "tc/kernels.hpp"

namespace tc::kernels {

namespace detail {
#if defined(TC_HAVE_AVX2)
extern const Table kAvx2;
#endif
#if defined(__aarch64__)
extern const Table kNeon;
#endif
} // namespace detail

std::string_view isa_name(Isa isa) {
    switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
    }
    return "unknown";
}

const Table* avx2_table() {
#if defined(TC_HAVE_AVX2)
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return supported ? &detail::kAvx2 : nullptr;
#else
    return nullptr;
#endif
}

const Table* neon_table() {
#if defined(__aarch64__)
    return &detail::kNeon;
#else
    return nullptr;
#endif
}

namespace {

const Table& select() {
    if (const char* force = std::getenv("TC_SIMD"); force != nullptr && std::string(force) == "scalar") {
        return scalar_table();
    }
    if (const Table* t = avx2_table()) return *t;
    if (const Table* t = neon_table()) return *t;
    return scalar_table();
}

} // namespace

const Table& active() {
    static const Table& table = select();
    return table;
}

void gemv(const Matrix& a, std::span<const float> x, std::span<float> y) {
    active().gemv(a.data.data(), a.rows, a.cols, x.data(), y.data());
}

void gemv_t_acc(const Matrix& a, std::span<const float> x, std::span<float> y) {
    const Table& t = active();
    for (std::size_t r = 0; r < a.rows; ++r) {
        if (x[r] != 0.0f) t.axpy(x[r], a.data.data() + r * a.cols, y.data(), a.cols);
    }
}

} // namespace tc::kernels
