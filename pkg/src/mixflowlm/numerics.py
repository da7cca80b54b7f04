"""Scalar special functions and log-space primitives.

Everything is float64. Functions accept Python floats or NumPy arrays;
scalar inputs return Python floats.
"""

from typing import NamedTuple

import numpy as np

from . import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))
HALF_LOG_2PI = 0.5 * LOG_2PI
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(ArithmeticError):
    """Computation lost all precision or produced a non-finite value.

    ``row`` and ``dim`` locate the failure inside a batched call when known.
    """

    def __init__(self, msg, row=None, dim=None):
        super().__init__(msg)
        self.row = row
        self.dim = dim


class ConvergenceError(NumericError):
    """An iterative solver failed to converge."""


class ScalarProb(NamedTuple):
    """A probability with its log and log-complement carriers."""

    value: float
    log_value: float
    log1m_value: float

    @classmethod
    def from_logs(cls, log_value, log1m_value=None):
        lv = np.asarray(log_value, dtype=np.float64)
        if log1m_value is None:
            l1 = _log1mexp(lv)
        else:
            l1 = np.asarray(log1m_value, dtype=np.float64)
        return cls(_out(np.exp(lv)), _out(lv), _out(l1))


def _out(a):
    a = np.asarray(a, dtype=np.float64)
    return float(a) if a.ndim == 0 else a


def _finite(x, name):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name}: input must be finite")
    return a


def _log1mexp(lv):
    """log(1 - exp(lv)) for lv <= 0, switching branches at -log 2."""
    lv = np.asarray(lv, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(lv > -0.6931471805599453,
                        np.log(-np.expm1(np.minimum(lv, 0.0))),
                        np.log1p(-np.exp(lv)))


def std_normal_logpdf(x):
    a = _finite(x, "std_normal_logpdf")
    return _out(-0.5 * a * a - HALF_LOG_2PI)


def std_normal_pdf(x):
    """phi(x) = exp(-x^2/2) / sqrt(2 pi)."""
    a = _finite(x, "std_normal_pdf")
    return _out(np.exp(-0.5 * a * a) * INV_SQRT_2PI)


def std_normal_logcdf(x):
    a = _finite(x, "std_normal_logcdf")
    return _out(_kernels.log_ndtr(a))


def std_normal_cdf(x):
    """Phi(x) with log and log-complement carriers."""
    a = _finite(x, "std_normal_cdf")
    lv = _kernels.log_ndtr(a)
    l1 = _kernels.log_ndtr(-a)
    return ScalarProb(_out(np.exp(lv)), _out(lv), _out(l1))


def std_normal_quantile(p):
    """Inverse of Phi.

    ``p`` may be a float/array probability or a :class:`ScalarProb`; in
    the latter case the log carriers are used, so tail probabilities keep
    full relative precision.
    """
    if isinstance(p, ScalarProb):
        lv = np.asarray(p.log_value, dtype=np.float64)
        l1 = np.asarray(p.log1m_value, dtype=np.float64)
        if np.any(~(lv < 0)) or np.any(~(l1 < 0)):
            raise DomainError("std_normal_quantile: p must lie in (0, 1)")
        return _out(_kernels.ndtri_pair(lv, l1))
    a = np.asarray(p, dtype=np.float64)
    if np.any(~((a > 0) & (a < 1))):
        raise DomainError("std_normal_quantile: p must lie in (0, 1)")
    with np.errstate(divide="ignore"):
        return _out(_kernels.ndtri_pair(np.log(a), np.log1p(-a)))


def std_normal_quantile_log(logp):
    """Quantile of exp(logp) for logp in (-inf, 0)."""
    a = np.asarray(logp, dtype=np.float64)
    if np.any(~((a < 0) & (a > -np.inf))):
        raise DomainError("std_normal_quantile_log: log p must lie in (-inf, 0)")
    return _out(_kernels.ndtri_log(a))


def log_sigmoid(x):
    """log(1 / (1 + e^-x)) without overflow."""
    a = np.asarray(x, dtype=np.float64)
    return _out(np.minimum(a, 0.0) - np.log1p(np.exp(-np.abs(a))))


def logistic_cdf(x):
    """sigma(x) via the sign-split formulation."""
    a = _finite(x, "logistic_cdf")
    e = np.exp(-np.abs(a))
    val = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return ScalarProb(_out(val), log_sigmoid(a), log_sigmoid(-a))


def logit(p):
    """Inverse of the logistic CDF."""
    if isinstance(p, ScalarProb):
        lv = np.asarray(p.log_value, dtype=np.float64)
        l1 = np.asarray(p.log1m_value, dtype=np.float64)
        if np.any(~(lv < 0)) or np.any(~(l1 < 0)):
            raise DomainError("logit: p must lie in (0, 1)")
        return _out(lv - l1)
    a = np.asarray(p, dtype=np.float64)
    if np.any(~((a > 0) & (a < 1))):
        raise DomainError("logit: p must lie in (0, 1)")
    return _out(np.log(a) - np.log1p(-a))


def logistic_logpdf(w):
    """log of the standard logistic density."""
    a = np.asarray(w, dtype=np.float64)
    return _out(log_sigmoid(a) + log_sigmoid(-a))


def log_sum_exp(values, axis=None):
    """log(sum(exp(values))) with max subtraction.

    With ``axis=None`` the whole input is reduced.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise DomainError("log_sum_exp: empty input")
    m = np.max(a, axis=axis, keepdims=True)
    if np.any(np.isnan(m)):
        raise DomainError("log_sum_exp: NaN input")
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(s.reshape(()))
    return np.squeeze(s, axis=axis)
