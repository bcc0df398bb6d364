"""Scalar special functions, smooth operators and quantile routines.

Everything here is pure and deterministic; randomized helpers draw from an
explicit (seed, stream) pair so results are reproducible bit-for-bit.
"""

import math

import numpy as np

# Lanczos approximation, g = 7, n = 9 (Godfrey coefficients).
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

_EULER_GAMMA = 0.57721566490153286060651209008240243


def rng_stream(seed, stream=0):
    """Deterministic generator for a (seed, stream) pair."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),)))


def lgamma(x):
    """Natural log of the gamma function for x > 0 (Lanczos approximation)."""
    x = float(x)
    if not x > 0.0:
        raise ValueError(f"lgamma requires x > 0, got {x}")
    # Reflection is unnecessary for positive arguments; evaluate directly.
    z = x - 1.0
    a = _LANCZOS_COEF[0]
    for i in range(1, len(_LANCZOS_COEF)):
        a += _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return 0.5 * math.log(2.0 * math.pi) + (z + 0.5) * math.log(t) - t + math.log(a)


def digamma(x):
    """Derivative of lgamma for x > 0.

    Uses the recurrence psi(x) = psi(x+1) - 1/x to push the argument above 6,
    then an asymptotic series in 1/x^2.
    """
    x = float(x)
    if not x > 0.0:
        raise ValueError(f"digamma requires x > 0, got {x}")
    result = 0.0
    while x < 6.0:
        result -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    # Asymptotic expansion with Bernoulli-number coefficients.
    series = (
        inv2 * (1.0 / 12.0
        - inv2 * (1.0 / 120.0
        - inv2 * (1.0 / 252.0
        - inv2 * (1.0 / 240.0
        - inv2 * (1.0 / 132.0
        - inv2 * (691.0 / 32760.0
        - inv2 * (1.0 / 12.0)))))))
    )
    return result + math.log(x) - 0.5 * inv - series


def softplus(z, scale=1.0):
    """Numerically stable (1/scale) * log(1 + exp(scale * z))."""
    if scale <= 0:
        raise ValueError("softplus scale must be positive")
    t = np.asarray(z, dtype=float) * scale
    out = np.where(t > 0, t + np.log1p(np.exp(-np.abs(t))), np.log1p(np.exp(-np.abs(t))))
    out = out / scale
    if np.ndim(z) == 0:
        return float(out)
    return out


def sigmoid(z):
    """Logistic function, stable for large |z|."""
    t = np.asarray(z, dtype=float)
    out = np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))), np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))
    if np.ndim(z) == 0:
        return float(out)
    return out


def soft_quantile(scores, gamma):
    """Temperature-controlled log-sum-exp upper quantile surrogate.

    Q = (1/gamma) * log((1/n) * sum_i exp(gamma * s_i)), stabilized by
    max-subtraction.  Monotone in gamma and satisfies
    max(s) - Q <= log(n)/gamma.
    """
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("soft_quantile of empty scores")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    m = float(np.max(s))
    return m + math.log(float(np.mean(np.exp(gamma * (s - m))))) / gamma


def soft_quantile_grad(scores, gamma):
    """Gradient of soft_quantile w.r.t. the scores (a softmax)."""
    s = np.asarray(scores, dtype=float)
    m = np.max(s)
    w = np.exp(gamma * (s - m))
    return w / np.sum(w)


def conformal_quantile(scores, alpha):
    """Conservative finite-sample quantile: k-th smallest with
    k = ceil((n+1)(1-alpha)).  Returns +inf when the rank exceeds n."""
    s = np.asarray(scores, dtype=float)
    n = s.size
    if n == 0:
        raise ValueError("conformal_quantile of empty scores")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    k = math.ceil((n + 1) * (1.0 - alpha))
    if k > n:
        return math.inf
    return float(np.sort(s)[k - 1])


def finite_difference_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        fp = f(x + e)
        fm = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def _midranks(v):
    """Average ranks (1-based), ties get the mean of their rank span."""
    v = np.asarray(v, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=float)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(u, v):
    """Spearman rank correlation with midrank tie handling.

    Returns nan when either input has zero rank variance.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.size < 2:
        raise ValueError("spearman requires two equal-length vectors of size >= 2")
    ru = _midranks(u)
    rv = _midranks(v)
    su = np.std(ru)
    sv = np.std(rv)
    if su == 0.0 or sv == 0.0:
        return math.nan
    return float(np.mean((ru - np.mean(ru)) * (rv - np.mean(rv))) / (su * sv))
