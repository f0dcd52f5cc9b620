#pragma once

#include "spkvec/tensor.hpp"

namespace spkvec {

// Four-lane reduction with a fixed association order. The explicit partial
// sums let the compiler vectorize without -ffast-math (which would also break
// the isfinite divergence guards), and the result is identical on every run.
inline double dot(const double* a, const double* b, Index n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    Index i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// dst += c * src, elementwise.
inline void axpy(double* dst, double c, const double* src, Index n) {
    for (Index i = 0; i < n; ++i) dst[i] += c * src[i];
}

}  // namespace spkvec
