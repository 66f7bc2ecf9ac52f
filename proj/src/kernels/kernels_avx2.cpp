#include "mmrank/kernels.hpp"

#if defined(__AVX2__)
#include <immintrin.h>

// AVX2 variants. One vector lane per partial sum, explicit mul+add (no fma),
// horizontal reduce in the same (s0+s1)+(s2+s3) order as the scalar reference,
// identical sequential tail: bitwise equal to the scalar backend by
// construction. This file alone is compiled with -mavx2; callers go through
// the runtime dispatcher.

namespace mmrank::kern {
namespace {

inline double hreduce(__m256d acc) {
    alignas(32) double lane[4];
    _mm256_store_pd(lane, acc);
    return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

double dot_avx2(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d va = _mm256_loadu_pd(a + i);
        __m256d vb = _mm256_loadu_pd(b + i);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(va, vb));
    }
    double s = hreduce(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

double sum_avx2(const double* x, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
    double s = hreduce(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

void axpy_avx2(double* y, double a, const double* x, size_t n) {
    __m256d va = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void add_avx2(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(double* y, double c, size_t n) {
    __m256d vc = _mm256_set1_pd(c);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(y + i), vc));
    for (; i < n; ++i) y[i] *= c;
}

}  // namespace

const Backend& avx2_backend() {
    static const Backend backend{
        "avx2", dot_avx2, sum_avx2, axpy_avx2, add_avx2, sub_avx2, mul_avx2, scale_avx2,
    };
    return backend;
}

}  // namespace mmrank::kern

#else

namespace mmrank::kern {

// Built without AVX2 support; the dispatcher never hands this out because
// avx2_supported() is false in that build.
const Backend& avx2_backend() { return scalar_backend(); }

}  // namespace mmrank::kern

#endif
