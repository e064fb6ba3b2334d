# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row and elementwise kernels; twin of ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, isfinite

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    /* single-precision exp: range reduction to |r| <= ln2/2, degree-6 polynomial,
       2^n built from exponent bits. Max relative error ~2e-7; inlines and vectorises. */
    static inline float sbssl_expf(float x) {
        const float hi = 88.3762626647949f, lo = -87.3365447504019f;
        x = x > hi ? hi : x;
        if (x < lo) return 0.0f;
        float t = x * 1.44269504088896341f;
        float n = (t + 12582912.0f) - 12582912.0f;
        float r = x - n * 0.693359375f;
        r = r + n * 2.12194440e-4f;
        float p = 1.9875691500e-4f;
        p = p * r + 1.3981999507e-3f;
        p = p * r + 8.3334519073e-3f;
        p = p * r + 4.1665795894e-2f;
        p = p * r + 1.6666665459e-1f;
        p = p * r + 5.0000001201e-1f;
        p = p * r * r + r + 1.0f;
        int32_t bits = ((int32_t)n + 127) << 23;
        float scale;
        memcpy(&scale, &bits, sizeof scale);
        return p * scale;
    }
    """
    float sbssl_expf(float x) nogil


cdef inline real _exp(real v) noexcept nogil:
    if real is float:
        return sbssl_expf(v)
    return exp(v)


cdef inline real _tanh(real u) noexcept nogil:
    # via exp: libm tanh is several times slower; exp overflow saturates to +-1
    return 1 - 2 / (_exp(2 * u) + 1)


def gelu_forward(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] y = out
    cdef real v, c = GELU_C, a = GELU_A
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <real>0.5 * v * (1 + _tanh(c * (v + a * v * v * v)))
    return out


def gelu_backward(real[::1] x, real[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] gx = out
    cdef real v, t, c = GELU_C, a = GELU_A, half = 0.5
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(c * (v + a * v * v * v))
            gx[i] = gy[i] * (half * (1 + t) + half * v * (1 - t * t) * c * (1 + 3 * a * v * v))
    return out


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t r, j, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef real m, lo, s, v
    cdef bint bad = 0
    with nogil:
        for r in range(rows):
            m = x[r, 0]
            lo = m
            for j in range(cols):
                v = x[r, j]
                m = v if v > m else m
                lo = v if v < lo else lo
            for j in range(cols):
                y[r, j] = _exp(<real>(x[r, j] - m))
            s = 0
            for j in range(cols):
                s += y[r, j]
            # nan reaches s through exp; +-inf shows in the extremes
            if not (isfinite(s) and isfinite(m) and isfinite(lo)):
                bad = 1
                break
            s = 1 / s
            for j in range(cols):
                y[r, j] = y[r, j] * s
    if bad:
        raise FloatingPointError("softmax received non-finite input")
    return out


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t r, j, rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = out
    cdef double d
    with nogil:
        for r in range(rows):
            d = 0.0
            for j in range(cols):
                d += gy[r, j] * y[r, j]
            for j in range(cols):
                gx[r, j] = <real>(y[r, j] * (gy[r, j] - d))
    return out


def layernorm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], cols = x.shape[1]
    dt = np.float32 if real is float else np.float64
    out = np.empty((rows, cols), dtype=dt)
    xhat_arr = np.empty((rows, cols), dtype=dt)
    rstd_arr = np.empty(rows, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xh = xhat_arr
    cdef real[::1] rs = rstd_arr
    cdef double mean, var, d, inv
    with nogil:
        for r in range(rows):
            mean = 0.0
            for j in range(cols):
                mean += x[r, j]
            mean /= cols
            var = 0.0
            for j in range(cols):
                d = x[r, j] - mean
                var += d * d
            var /= cols
            inv = 1.0 / sqrt(var + eps)
            rs[r] = <real>inv
            for j in range(cols):
                d = (x[r, j] - mean) * inv
                xh[r, j] = <real>d
                y[r, j] = <real>(d * gain[j] + bias[j])
    return out, xhat_arr, rstd_arr


def layernorm_backward(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t r, j, rows = gy.shape[0], cols = gy.shape[1]
    dt = np.float32 if real is float else np.float64
    gx_arr = np.empty((rows, cols), dtype=dt)
    # column reductions accumulate in double, then cast
    ggain_acc = np.zeros(cols, dtype=np.float64)
    gbias_acc = np.zeros(cols, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = ggain_acc
    cdef double[::1] gb = gbias_acc
    cdef double m1, m2, g
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                g = gy[r, j] * gain[j]
                m1 += g
                m2 += g * xhat[r, j]
                gg[j] += gy[r, j] * xhat[r, j]
                gb[j] += gy[r, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                g = gy[r, j] * gain[j]
                gx[r, j] = <real>((g - m1 - xhat[r, j] * m2) * rstd[r])
    return gx_arr, ggain_acc.astype(dt), gbias_acc.astype(dt)
