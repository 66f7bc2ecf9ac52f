#pragma once

#include <cstddef>
#include <string>

namespace mmrank::kern {

// Double-precision inner loops behind the tensor ops. Two backends: a scalar
// reference and an AVX2 variant selected at runtime. Both use the identical
// accumulation tree (4 partial sums, combined as (s0+s1)+(s2+s3), sequential
// tail), so results are bitwise equal across backends; the equivalence suite
// asserts exact equality, and runs stay reproducible no matter which backend
// the dispatcher picks.
struct Backend {
    const char* name;
    double (*dot)(const double* a, const double* b, size_t n);
    double (*sum)(const double* x, size_t n);
    void (*axpy)(double* y, double a, const double* x, size_t n);  // y += a*x
    void (*add)(double* out, const double* a, const double* b, size_t n);
    void (*sub)(double* out, const double* a, const double* b, size_t n);
    void (*mul)(double* out, const double* a, const double* b, size_t n);
    void (*scale)(double* y, double c, size_t n);  // y *= c
};

const Backend& scalar_backend();
bool avx2_supported();
const Backend& avx2_backend();  // valid to call only when avx2_supported()

// Active backend. Defaults to the best supported variant; the MMRANK_KERNELS
// environment variable ("scalar" | "avx2" | "auto") overrides at startup.
const Backend& active();
void set_backend(const std::string& name);  // "scalar" | "avx2" | "auto"

inline double dot(const double* a, const double* b, size_t n) { return active().dot(a, b, n); }
inline double sum(const double* x, size_t n) { return active().sum(x, n); }
inline void axpy(double* y, double a, const double* x, size_t n) { active().axpy(y, a, x, n); }
inline void add(double* out, const double* a, const double* b, size_t n) { active().add(out, a, b, n); }
inline void sub(double* out, const double* a, const double* b, size_t n) { active().sub(out, a, b, n); }
inline void mul(double* out, const double* a, const double* b, size_t n) { active().mul(out, a, b, n); }
inline void scale(double* y, double c, size_t n) { active().scale(y, c, n); }

// C[m×n] += A[m×k] · B[k×n], row-major. Accumulation over k is sequential per
// output element in every backend, so backends agree bitwise here too.
void matmul_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);
// C[m×k] += G[m×n] · Bᵀ, with B row-major k×n.
void matmul_nt(double* c, const double* g, const double* b, size_t m, size_t n, size_t k);
// C[k×n] += Aᵀ · G, with A row-major m×k.
void matmul_tn(double* c, const double* a, const double* g, size_t m, size_t k, size_t n);

}  // namespace mmrank::kern
