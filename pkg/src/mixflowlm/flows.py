"""Invertible mixture transforms with exact log-determinants.

Two levels of API are provided:

* scalar/vector functions operating on a single parameter bundle
  (``mix1_forward(z, params)`` etc.), convenient for tests and tools;
* batched functions over rows (``*_batch``) and autodiff operations
  (:func:`mix1_flow`, :func:`mixd_flow`) used by the flow stack. The
  operations carry analytic vector-Jacobian products, so training never
  differentiates through a root finder.

Mixture weights enter the batched functions as unnormalized log-weights;
they are normalized internally (softmax), which makes every map invariant
to a common shift of the log-weights.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .numerics import (
    HALF_LOG_2PI,
    ConvergenceError,
    DomainError,
    NumericError,
    ScalarProb,
    logistic_logpdf,
)

LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0


def _lse(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _log_norm_pdf(x):
    return -0.5 * x * x - HALF_LOG_2PI


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class MixtureParams1D:
    """Weights, means and log standard deviations of a 1D Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    log_stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.log_stds, dtype=np.float64))
        if not (w.shape == m.shape == s.shape) or w.ndim != 1:
            raise DomainError("MixtureParams1D: weights, means, log_stds need equal 1D shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("MixtureParams1D: weights must be positive and sum to 1")
        if np.any(s < LOG_STD_MIN) or np.any(s > LOG_STD_MAX) or not np.all(np.isfinite(m)):
            raise DomainError("MixtureParams1D: log_stds must lie in [-7, 2], means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "log_stds", s)

    @classmethod
    def from_logits(cls, logits, means, log_stds):
        lg = np.asarray(logits, dtype=np.float64)
        w = np.exp(lg - _lse(lg))
        return cls(w / w.sum(), means, log_stds)

    @property
    def V(self):
        return self.weights.shape[0]

    @property
    def stds(self):
        return np.exp(self.log_stds)

    def batch(self):
        return np.log(self.weights)[None], self.means[None], self.log_stds[None]


@dataclass(frozen=True)
class IsotropicMixtureD:
    """d-dimensional Gaussian mixture with covariance sigma_k^2 I per component."""

    weights: np.ndarray
    means: np.ndarray
    log_stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        s = np.atleast_1d(np.asarray(self.log_stds, dtype=np.float64))
        if w.ndim != 1 or m.shape[0] != w.shape[0] or s.shape != w.shape:
            raise DomainError("IsotropicMixtureD: expected weights [V], means [V,d], log_stds [V]")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("IsotropicMixtureD: weights must be positive and sum to 1")
        if np.any(s < LOG_STD_MIN) or np.any(s > LOG_STD_MAX) or not np.all(np.isfinite(m)):
            raise DomainError("IsotropicMixtureD: log_stds must lie in [-7, 2], means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "log_stds", s)

    @property
    def V(self):
        return self.means.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def batch(self):
        return np.log(self.weights)[None], self.means[None], self.log_stds[None]

    def sample(self, n, rng):
        k = rng.choice(self.V, size=n, p=self.weights)
        z = self.means[k] + np.exp(self.log_stds[k])[:, None] * rng.standard_normal((n, self.d))
        return z, k


@dataclass
class RosenblattState:
    """Posterior component weights before conditioning on dimension ``dim_index``.

    ``dim_index`` is zero-based: state 0 holds the prior weights.
    """

    alphas: np.ndarray
    dim_index: int = 0


# ------------------------------------------------------- batched primitives

def _check_rows(z, logw, means, log_stds, d=None):
    if logw.ndim != 2 or log_stds.shape != logw.shape:
        raise ad.ShapeError("mixture", logw.shape, log_stds.shape)
    if means.shape[:2] != logw.shape or (d is not None and means.shape[2] != d):
        raise ad.ShapeError("mixture", means.shape, logw.shape)
    if z.shape[0] != logw.shape[0]:
        raise ad.ShapeError("mixture", z.shape, logw.shape)


def mixture_carriers_1d(z, logw, means, log_stds):
    """Per-row log F, log(1-F) and log p of 1D mixtures.

    Shapes: z [N], others [N,V].
    """
    la = logw - _lse(logw, keepdims=True)
    x = (z[:, None] - means) / np.exp(log_stds)
    lf = _lse(la + _kernels.log_ndtr(x))
    l1 = _lse(la + _kernels.log_ndtr(-x))
    lp = _lse(la + _log_norm_pdf(x) - log_stds)
    return lf, l1, lp


def mixd_forward_batch(z, logw, means, log_stds):
    """Rowwise Rosenblatt transform. Returns (u [N,d], log p(z) [N])."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    _check_rows(z, logw, means, log_stds, z.shape[1])
    u, lp = _kernels.mixd_forward(z, logw, means, log_stds)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(lp))):
        bad = np.argwhere(~np.isfinite(u))
        if bad.size:
            row, dim = int(bad[0][0]), int(bad[0][1])
        else:
            row, dim = int(np.flatnonzero(~np.isfinite(lp))[0]), None
        raise NumericError(f"mixture transform lost precision at row {row}, dim {dim}", row, dim)
    return u, lp


def mixd_inverse_batch(u, logw, means, log_stds):
    u = np.ascontiguousarray(u, dtype=np.float64)
    _check_rows(u, logw, means, log_stds, u.shape[1])
    if not np.all(np.isfinite(u)):
        raise DomainError("mixture inverse: u must be finite")
    z, fail = _kernels.mixd_inverse(u, logw, means, log_stds)
    if np.any(fail >= 0):
        row = int(np.flatnonzero(fail >= 0)[0])
        dim = int(fail[row])
        raise ConvergenceError(f"mixture inverse failed to converge at row {row}, dim {dim}", row, dim)
    return z


def mix1_forward_batch(z, logw, means, log_stds):
    """Mixture-CDF transform of scalars. Shapes: z [N], params [N,V]."""
    z = np.asarray(z, dtype=np.float64)
    u, lp = mixd_forward_batch(z[:, None], logw, means[:, :, None], log_stds)
    return u[:, 0], lp - _log_norm_pdf(u[:, 0])


def mix1_inverse_batch(u, logw, means, log_stds):
    u = np.asarray(u, dtype=np.float64)
    return mixd_inverse_batch(u[:, None], logw, means[:, :, None], log_stds)[:, 0]


def mixd_log_pdf_batch(z, logw, means, log_stds):
    """Direct joint log density, independent of the sequential transform."""
    la = logw - _lse(logw, keepdims=True)
    d = z.shape[1]
    sq = np.sum((z[:, None, :] - means) ** 2, axis=-1)
    comp = -0.5 * sq * np.exp(-2 * log_stds) - d * log_stds - d * HALF_LOG_2PI
    return _lse(la + comp)


def rosenblatt_alphas_batch(z, logw, means, log_stds):
    """Log posterior weights before each dimension: [N, d+1, V]."""
    n, d = z.shape
    la = logw - _lse(logw, keepdims=True)
    out = np.empty((n, d + 1, la.shape[1]))
    out[:, 0] = la
    for i in range(d):
        x = (z[:, i, None] - means[:, :, i]) / np.exp(log_stds)
        t = la + _log_norm_pdf(x) - log_stds
        la = t - _lse(t, keepdims=True)
        out[:, i + 1] = la
    return out


# --------------------------------------------------------- analytic VJPs

def mixd_vjp(z, logw, means, log_stds, u, gu, glog_det):
    """Cotangents of (u, log_det) with respect to (z, logw, means, log_stds).

    ``log_det = log p(z) - sum_i log phi(u_i)``.
    """
    n, d = z.shape
    s = np.exp(log_stds)
    la0 = logw - _lse(logw, keepdims=True)
    w = np.exp(la0)
    G = gu + glog_det[:, None] * u
    ref_all = _log_norm_pdf(u)
    gz = np.zeros_like(z)
    gm = np.zeros_like(means)
    gls = np.zeros_like(log_stds)
    GP = np.empty_like(means)
    X = np.empty_like(means)
    la = la0
    for i in range(d):
        x = (z[:, i, None] - means[:, :, i]) / s
        X[:, :, i] = x
        lphi = _kernels.log_ndtr(x)
        lphic = _kernels.log_ndtr(-x)
        lf = _lse(la + lphi, keepdims=True)
        l1 = _lse(la + lphic, keepdims=True)
        ref = ref_all[:, i, None]
        lower = lf <= l1
        # d u_i / d a_k where alpha = softmax(a), tail-aware difference
        P = np.where(lower,
                     np.exp(la + lphi - ref) - np.exp(la + lf - ref),
                     np.exp(la + l1 - ref) - np.exp(la + lphic - ref))
        lpdf = _log_norm_pdf(x) - log_stds
        D = np.exp(la + _log_norm_pdf(x) - ref)
        Gi = G[:, i, None]
        gz[:, i] += np.sum(Gi * D / s, axis=1)
        gm[:, :, i] -= Gi * D / s
        gls -= Gi * D * x
        GP[:, :, i] = Gi * P
        t = la + lpdf
        la = t - _lse(t, keepdims=True)
    R = np.exp(la)
    gl = glog_det[:, None]
    glogw = GP.sum(axis=2) + gl * (R - w)
    gc = np.cumsum(GP[:, :, ::-1], axis=2)[:, :, ::-1] - GP + gl[:, :, None] * R[:, :, None]
    sd = s[:, :, None]
    gz += np.sum(-gc * X / sd, axis=1)
    gm += gc * X / sd
    gls += np.sum(gc * (X * X - 1.0), axis=2)
    return gz, glogw, gm, gls


def _mixd_fwd(z, logw, means, log_stds):
    u, lp = mixd_forward_batch(z, logw, means, log_stds)
    return u, lp - np.sum(_log_norm_pdf(u), axis=1)


def _mixd_bwd(inputs, outputs, cots):
    z, logw, means, log_stds = inputs
    return list(mixd_vjp(z, logw, means, log_stds, outputs[0], cots[0], cots[1]))


_mixd_op = ad.register_custom(_mixd_fwd, _mixd_bwd, n_inputs=4, n_outputs=2, name="mixd_flow")


def mixd_flow(z, logw, means, log_stds):
    """Differentiable Rosenblatt transform.

    Tensors z [N,d], logw [N,V], means [N,V,d], log_stds [N,V].
    Returns (u [N,d], log_det [N]).
    """
    return _mixd_op(z, logw, means, log_stds)


def _mix1_fwd(z, logw, means, log_stds):
    return mix1_forward_batch(z, logw, means, log_stds)


def _mix1_bwd(inputs, outputs, cots):
    z, logw, means, log_stds = inputs
    gz, glw, gm, gls = mixd_vjp(z[:, None], logw, means[:, :, None], log_stds,
                                outputs[0][:, None], cots[0][:, None], cots[1])
    return [gz[:, 0], glw, gm[:, :, 0], gls]


_mix1_op = ad.register_custom(_mix1_fwd, _mix1_bwd, n_inputs=4, n_outputs=2, name="mix1_flow")


def mix1_flow(z, logw, means, log_stds):
    """Differentiable Mixture-CDF transform.

    Tensors z [N], logw/means/log_stds [N,V]. Returns (u [N], log_det [N]).
    """
    return _mix1_op(z, logw, means, log_stds)


# ------------------------------------------------------ scalar-level API

def _scalar(z, name):
    z = float(z)
    if not np.isfinite(z):
        raise DomainError(f"{name}: input must be finite")
    return np.array([z])


def mix1_log_pdf(z, p):
    lw, m, ls = p.batch()
    return float(mixture_carriers_1d(_scalar(z, "mix1_log_pdf"), lw, m, ls)[2][0])


def mix1_pdf(z, p):
    return float(np.exp(mix1_log_pdf(z, p)))


def mix1_cdf(z, p):
    """Mixture CDF with linear, log and log-complement carriers."""
    lw, m, ls = p.batch()
    lf, l1, _ = mixture_carriers_1d(_scalar(z, "mix1_cdf"), lw, m, ls)
    return ScalarProb(float(np.exp(lf[0])), float(lf[0]), float(l1[0]))


def mix1_forward(z, p):
    """u = Phi^{-1}(F_mix(z)) and log_det = log p_mix(z) - log phi(u)."""
    lw, m, ls = p.batch()
    u, ld = mix1_forward_batch(_scalar(z, "mix1_forward"), lw, m, ls)
    return float(u[0]), float(ld[0])


def mix1_inverse(u, p):
    lw, m, ls = p.batch()
    return float(mix1_inverse_batch(_scalar(u, "mix1_inverse"), lw, m, ls)[0])


def mixd_log_pdf(z, mix):
    lw, m, ls = mix.batch()
    return float(mixd_log_pdf_batch(np.asarray(z, dtype=np.float64)[None], lw, m, ls)[0])


def mixd_forward(z, mix):
    """Sequential per-dimension Mixture-CDF transform with Bayes-updated weights."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != mix.d:
        raise ad.ShapeError("mixd_forward", z.shape, mix.means.shape)
    if not np.all(np.isfinite(z)):
        raise DomainError("mixd_forward: input must be finite")
    lw, m, ls = mix.batch()
    u, lp = mixd_forward_batch(z, lw, m, ls)
    return u[0], float(lp[0] - np.sum(_log_norm_pdf(u[0])))


def mixd_inverse(u, mix):
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    if u.shape[1] != mix.d:
        raise ad.ShapeError("mixd_inverse", u.shape, mix.means.shape)
    lw, m, ls = mix.batch()
    return mixd_inverse_batch(u, lw, m, ls)[0]


def rosenblatt_posterior(alphas, z_i, mix, i):
    """Bayes update of component weights after observing coordinate ``i``.

    ``i`` is zero-based. Computed in log space.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-10:
        raise DomainError("rosenblatt_posterior: alphas must be a probability vector")
    x = (float(z_i) - mix.means[:, i]) / np.exp(mix.log_stds)
    with np.errstate(divide="ignore", over="ignore"):
        t = np.log(a) + _log_norm_pdf(x) - mix.log_stds
    if not np.any(np.isfinite(t)):
        raise NumericError(f"rosenblatt_posterior: all components underflow at dim {i}")
    return np.exp(t - _lse(t))


def rosenblatt_states(z, mix):
    """The chain of :class:`RosenblattState` visited while transforming ``z``."""
    z = np.asarray(z, dtype=np.float64)
    states = [RosenblattState(mix.weights.copy(), 0)]
    for i in range(mix.d):
        states.append(RosenblattState(rosenblatt_posterior(states[-1].alphas, z[i], mix, i), i + 1))
    return states


def mol_forward(z, p):
    """Logit-space variant: w = logit(F_mix(z)), log_det = log p(z) - log p_logistic(w)."""
    lw, m, ls = p.batch()
    lf, l1, lp = mixture_carriers_1d(_scalar(z, "mol_forward"), lw, m, ls)
    w = float(lf[0] - l1[0])
    return w, float(lp[0] - logistic_logpdf(w))


def mol_inverse(w, p):
    """Inverse of :func:`mol_forward` via the Gaussian-space inverse."""
    from .numerics import log_sigmoid
    w = float(w)
    lf, l1 = log_sigmoid(w), log_sigmoid(-w)
    u = float(_kernels.ndtri_pair(np.array([lf]), np.array([l1]))[0])
    return mix1_inverse(u, p)


def affine_forward(z, scale, shift):
    """u = (z - shift) / scale with log_det = -log scale."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise DomainError("affine_forward: scale must be positive")
    u = (np.asarray(z, dtype=np.float64) - shift) / scale
    return u, -np.log(scale) * np.ones_like(u)


def affine_inverse(u, scale, shift):
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise DomainError("affine_inverse: scale must be positive")
    return np.asarray(u, dtype=np.float64) * scale + shift
