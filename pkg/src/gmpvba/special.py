"""Digamma and log-gamma for positive real arguments.

Both use the upward recurrence to push the argument above ``_SHIFT`` and then
an asymptotic (Stirling-type) series, which is accurate to a few ulps there.
"""

import numpy as np

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# B_{2n} / (2n) for the digamma series, n = 1..7
_DIGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_{2n} / (2n (2n - 1)) for the log-gamma series, n = 1..7
_LGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _prepare(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("argument must be finite and strictly positive")
    return x


def _shift_counts(x):
    return np.where(x < _SHIFT, np.ceil(_SHIFT - x), 0.0).astype(int)


def digamma(x):
    """Logarithmic derivative of the gamma function, elementwise for ``x > 0``."""
    x = _prepare(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    n = _shift_counts(x)
    correction = np.zeros_like(x)
    y = x.copy()
    for i in range(int(n.max(initial=0))):
        active = i < n
        correction[active] += 1.0 / y[active]
        y[active] += 1.0
    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    for c in reversed(_DIGAMMA_COEFS):
        series = (series + c) * inv2
    out = np.log(y) - 0.5 / y - series - correction
    return out[0] if scalar else out


def ln_gamma(x):
    """Natural log of the gamma function, elementwise for ``x > 0``."""
    x = _prepare(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    n = _shift_counts(x)
    product = np.ones_like(x)
    y = x.copy()
    for i in range(int(n.max(initial=0))):
        active = i < n
        product[active] *= y[active]
        y[active] += 1.0
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in reversed(_LGAMMA_COEFS[1:]):
        series = (series + c) * inv2
    series = (series + _LGAMMA_COEFS[0]) * inv
    out = (y - 0.5) * np.log(y) - y + _HALF_LOG_2PI + series - np.log(product)
    return out[0] if scalar else out
