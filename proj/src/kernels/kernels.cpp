#include "mmrank/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "mmrank/errors.hpp"

namespace mmrank::kern {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

// avx2_backend() degrades to the scalar table when the TU was built without
// -mavx2; detect that so avx2_supported() stays truthful.
bool avx2_built() { return avx2_backend().name == std::string_view("avx2"); }

const Backend* pick_default() {
    if (const char* env = std::getenv("MMRANK_KERNELS")) {
        std::string_view v(env);
        if (v == "scalar") return &scalar_backend();
        if (v == "avx2" && avx2_built() && cpu_has_avx2()) return &avx2_backend();
        // "auto" or anything unusable falls through to detection
    }
    return (avx2_built() && cpu_has_avx2()) ? &avx2_backend() : &scalar_backend();
}

std::atomic<const Backend*>& active_slot() {
    static std::atomic<const Backend*> slot{pick_default()};
    return slot;
}

}  // namespace

bool avx2_supported() { return avx2_built() && cpu_has_avx2(); }

const Backend& active() { return *active_slot().load(std::memory_order_relaxed); }

void set_backend(const std::string& name) {
    if (name == "scalar") {
        active_slot().store(&scalar_backend());
    } else if (name == "avx2") {
        if (!avx2_supported()) throw ConfigError("avx2 backend unavailable on this host");
        active_slot().store(&avx2_backend());
    } else if (name == "auto") {
        active_slot().store(avx2_supported() ? &avx2_backend() : &scalar_backend());
    } else {
        throw ConfigError("unknown kernel backend '" + name + "'");
    }
}

void matmul_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    const Backend& be = active();
    for (size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) be.axpy(ci, ai[p], b + p * n, n);
    }
}

void matmul_nt(double* c, const double* g, const double* b, size_t m, size_t n, size_t k) {
    const Backend& be = active();
    for (size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        double* ci = c + i * k;
        for (size_t p = 0; p < k; ++p) ci[p] += be.dot(gi, b + p * n, n);
    }
}

void matmul_tn(double* c, const double* a, const double* g, size_t m, size_t k, size_t n) {
    const Backend& be = active();
    for (size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * n;
        for (size_t p = 0; p < k; ++p) be.axpy(c + p * n, ai[p], gi, n);
    }
}

}  // namespace mmrank::kern
