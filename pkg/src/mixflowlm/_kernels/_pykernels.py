"""Vectorized NumPy implementation of the hot numerical kernels.

This module is the reference backend. The compiled backend in
``_ckernels.pyx`` follows the same algorithms scalar by scalar.
"""

import numpy as np
from scipy.special import erfc

NAME = "python"

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_SQRT1_2 = np.sqrt(0.5)
_LOG_HALF = np.log(0.5)

# Wichura (1988), algorithm AS241 (PPND16).
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427,
      13731.693765509461125, 45921.953931549871457, 67265.770927008700853,
      33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083,
      5394.1960214247511077, 21213.794301586595867, 39307.89580009271061,
      28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055,
      3.64784832476320460504, 1.27045825245236838258, 0.24178072517745061177,
      0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494,
      0.68976733498510000455, 0.14810397642748007459,
      0.0151986665636164571966, 5.475938084995344946e-4,
      1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358,
      0.29656057182850489123, 0.026532189526576123093,
      0.0012426609473880784386, 2.71155556874348757815e-5,
      2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531,
      0.0148753612908506148525, 7.868691311456132591e-4,
      1.8463183175100546818e-5, 1.4215117583164458887e-7,
      2.04426310338993978564e-15)

_ASYM_TERMS = 12
_NEWTON_STEPS = 2
_BRACKET_SIGMAS = 12.0
_MAX_DOUBLINGS = 60
_MAX_BISECT = 200
_MAX_NEWTON = 100


def _poly(coef, r):
    acc = np.full_like(r, coef[-1])
    for c in coef[-2::-1]:
        acc = acc * r + c
    return acc


def _lse(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis)


def log_ndtr(x):
    """log Phi(x), accurate in both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    hi = x > 0.0
    lo = x < -20.0
    mid = ~(hi | lo)
    out[hi] = np.log1p(-0.5 * erfc(x[hi] * _SQRT1_2))
    out[mid] = np.log(0.5 * erfc(-x[mid] * _SQRT1_2))
    if lo.any():
        xl = x[lo]
        x2 = xl * xl
        term = np.ones_like(xl)
        s = np.ones_like(xl)
        for n in range(1, _ASYM_TERMS + 1):
            term = term * (-(2 * n - 1) / x2)
            s = s + term
        out[lo] = -0.5 * x2 - np.log(-xl) - _HALF_LOG_2PI + np.log(s)
    return out


def _log_pdf(x):
    return -0.5 * x * x - _HALF_LOG_2PI


def _ndtri_lower(logp):
    """Quantile for log p <= log(1/2); the result is <= 0."""
    logp = np.asarray(logp, dtype=np.float64)
    x = np.empty_like(logp)
    q = np.exp(logp) - 0.5
    central = np.abs(q) <= 0.425
    if central.any():
        qc = q[central]
        r = 0.180625 - qc * qc
        x[central] = qc * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    if tail.any():
        r = np.sqrt(-logp[tail])
        xt = np.empty_like(r)
        near = r <= 5.0
        rn = r[near] - 1.6
        xt[near] = -_poly(_C, rn) / _poly(_D, rn)
        far = ~near
        rf = r[far] - 5.0
        xt[far] = -_poly(_E, rf) / _poly(_F, rf)
        # beyond the fitted range start from the asymptotic expansion
        ext = r > 27.0
        if ext.any():
            L = r[ext] ** 2
            xt[ext] = -np.sqrt(2.0 * L - np.log(4.0 * np.pi * L))
        x[tail] = xt
    steps = _NEWTON_STEPS + (4 if np.any(logp < -729.0) else 0)
    for _ in range(steps):
        lphi = log_ndtr(x)
        x = x - (lphi - logp) * np.exp(lphi - _log_pdf(x))
    return x


def ndtri_log(logp):
    """Standard normal quantile of exp(logp), for logp < 0."""
    logp = np.asarray(logp, dtype=np.float64)
    out = np.empty_like(logp)
    low = logp <= _LOG_HALF
    out[low] = _ndtri_lower(logp[low])
    up = ~low
    out[up] = -_ndtri_lower(np.log(-np.expm1(logp[up])))
    return out


def ndtri_pair(log_f, log_1mf):
    """Quantile from both carriers, using whichever side is smaller."""
    log_f = np.asarray(log_f, dtype=np.float64)
    log_1mf = np.asarray(log_1mf, dtype=np.float64)
    low = log_f <= log_1mf
    out = np.empty_like(log_f)
    out[low] = _ndtri_lower(log_f[low])
    out[~low] = -_ndtri_lower(log_1mf[~low])
    return out


def _carriers(z, la, m, s):
    x = (z[:, None] - m) / s
    return x, _lse(la + log_ndtr(x)), _lse(la + log_ndtr(-x))


def mixd_forward(z, logw, means, log_stds):
    """Sequential mixture transform of rows of ``z``.

    Shapes: z [N,d], logw [N,V], means [N,V,d], log_stds [N,V].
    Returns (u [N,d], log p(z) [N]).
    """
    n, d = z.shape
    s = np.exp(log_stds)
    la = logw - _lse(logw)[:, None]
    u = np.empty((n, d))
    logp = np.zeros(n)
    for i in range(d):
        x, lf, l1 = _carriers(z[:, i], la, means[:, :, i], s)
        u[:, i] = ndtri_pair(lf, l1)
        t = la + (_log_pdf(x) - log_stds)
        li = _lse(t)
        logp += li
        la = t - li[:, None]
    return u, logp


def _solve(target, la, m, log_s):
    """Find z with F_mix(z) = Phi(target) for each row.

    Returns (z, ok). The residual is taken in log space on the smaller
    side of the distribution, so it stays accurate in both tails.
    """
    n = target.shape[0]
    s = np.exp(log_s)
    lower = target <= 0.0
    lt = np.where(lower, log_ndtr(target), log_ndtr(-target))
    ok = np.ones(n, dtype=bool)

    def resid(idx, z):
        x, lf, l1 = _carriers(z, la[idx], m[idx], s[idx])
        r = np.where(lower[idx], lf - lt[idx], lt[idx] - l1)
        lref = np.where(lower[idx], lf, l1)
        lp = _lse(la[idx] + _log_pdf(x) - log_s[idx])
        return r, lref, lp

    smax = s.max(axis=1)
    lo = m.min(axis=1) - _BRACKET_SIGMAS * smax
    hi = m.max(axis=1) + _BRACKET_SIGMAS * smax
    all_idx = np.arange(n)
    for k in range(_MAX_DOUBLINGS + 1):
        r_lo = resid(all_idx, lo)[0]
        r_hi = resid(all_idx, hi)[0]
        bad_lo = r_lo > 0
        bad_hi = r_hi < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        if k == _MAX_DOUBLINGS:
            ok &= ~(bad_lo | bad_hi)
            break
        w = hi - lo
        lo = np.where(bad_lo, lo - w, lo)
        hi = np.where(bad_hi, hi + w, hi)

    tol_b = 1e-3 * s.min(axis=1)
    active = np.flatnonzero(ok & (hi - lo > tol_b))
    for _ in range(_MAX_BISECT):
        if active.size == 0:
            break
        mid = 0.5 * (lo[active] + hi[active])
        r = resid(active, mid)[0]
        lo[active] = np.where(r <= 0, mid, lo[active])
        hi[active] = np.where(r > 0, mid, hi[active])
        active = active[hi[active] - lo[active] > tol_b[active]]

    z = 0.5 * (lo + hi)
    active = np.flatnonzero(ok)
    conv = np.zeros(n, dtype=bool)
    for _ in range(_MAX_NEWTON):
        if active.size == 0:
            break
        za = z[active]
        r, lref, lp = resid(active, za)
        lo[active] = np.where(r <= 0, za, lo[active])
        hi[active] = np.where(r >= 0, za, hi[active])
        zn = za - r * np.exp(lref - lp)
        outside = ~((zn > lo[active]) & (zn < hi[active]))
        zn = np.where(outside, 0.5 * (lo[active] + hi[active]), zn)
        done = (np.abs(zn - za) <= 1e-14 * (1.0 + np.abs(za))) | (r == 0)
        done |= hi[active] - lo[active] <= 4e-16 * (1.0 + np.abs(za))
        z[active] = np.where(r == 0, za, zn)
        conv[active[done]] = True
        active = active[~done]
    ok &= conv
    return z, ok


def mixd_inverse(u, logw, means, log_stds):
    """Inverse of :func:`mixd_forward`.

    Returns (z [N,d], fail [N]) where ``fail`` holds the first dimension
    whose root finder did not converge, or -1.
    """
    n, d = u.shape
    la = logw - _lse(logw)[:, None]
    z = np.empty((n, d))
    fail = np.full(n, -1, dtype=np.int64)
    for i in range(d):
        zi, ok = _solve(u[:, i], la, means[:, :, i], log_stds)
        fail = np.where((~ok) & (fail < 0), i, fail)
        z[:, i] = zi
        x = (zi[:, None] - means[:, :, i]) / np.exp(log_stds)
        t = la + (_log_pdf(x) - log_stds)
        la = t - _lse(t)[:, None]
    return z, fail
