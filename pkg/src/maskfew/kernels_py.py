"""Pure-numpy implementations of the hot kernels.

These are the fallback for the compiled extension in ``_kernels.pyx``.
Both backends expose the same six functions with identical signatures;
``maskfew.backend`` picks one at import time.

All arrays are float64 and C-contiguous.  The 2-D kernels treat the
last axis as the feature/row axis and every leading axis as flattened
rows, which is how tensor.py calls them.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x):
    """Exact-erf GELU: x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, gy):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return gy * (cdf + x * phi)


def softmax_fwd(x):
    """Row softmax of a 2-D array, stabilized by max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Per-row normalization followed by the affine map.

    Returns (y, mean, rstd); mean and rstd are cached for the backward.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * rstd * gain + bias
    return y, mu[:, 0], rstd[:, 0]


def layernorm_bwd(x, gain, mu, rstd, gy):
    rstd = rstd[:, None]
    xhat = (x - mu[:, None]) * rstd
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd * (gxhat - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias
