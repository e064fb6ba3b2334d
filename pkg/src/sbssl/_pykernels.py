"""Pure-NumPy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Row kernels operate on C-contiguous 2-D arrays (rows x features).
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_backward(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_forward(x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax received non-finite input")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def layernorm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_backward(gy, xhat, rstd, gain):
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    g = gy * gain
    gx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (g * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx, ggain, gbias
