#include "mmrank/kernels.hpp"

// Scalar reference kernels. The reductions keep four independent partial sums
// and combine them as (s0+s1)+(s2+s3); the AVX2 variant maps each partial sum
// onto one vector lane, which is what makes the two backends bitwise equal.
// Compiled with -ffp-contract=off so the compiler cannot fuse a*b+c into fma
// and break that equality.

namespace mmrank::kern {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

double sum_scalar(const double* x, size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i];
        s1 += x[i + 1];
        s2 += x[i + 2];
        s3 += x[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; i < n; ++i) s += x[i];
    return s;
}

void axpy_scalar(double* y, double a, const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void add_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(double* y, double c, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] *= c;
}

}  // namespace

const Backend& scalar_backend() {
    static const Backend backend{
        "scalar", dot_scalar, sum_scalar, axpy_scalar, add_scalar, sub_scalar, mul_scalar, scale_scalar,
    };
    return backend;
}

}  // namespace mmrank::kern
