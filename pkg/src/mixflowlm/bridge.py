"""Gaussian codebook encoder and tied Bayesian decoder.

Token k is represented by N(mu_k, sigma_k^2 I). The decoder is the
posterior p(k | z) under a uniform prior, so for any token x

    log p(x | z) - log q(z | x) = -log sum_j N_j(z),

which is :func:`reconstruction_term`.
"""

import numpy as np

from . import autodiff as ad
from .numerics import HALF_LOG_2PI

INIT_MEAN_SCALE = 0.5
INIT_LOG_STD = float(np.log(0.3))


class DataError(ValueError):
    """Input data violates a precondition (bad token ids, shapes)."""


class Codebook:
    """Per-token means [V, d] and isotropic log standard deviations [V].

    Parameters are autodiff Tensors. A flow layer that ties to the codebook
    holds a reference to this object, so both views share storage.
    """

    def __init__(self, means, log_stds):
        self.means = means if isinstance(means, ad.Tensor) else ad.Tensor(means, requires_grad=True)
        self.log_stds = (log_stds if isinstance(log_stds, ad.Tensor)
                         else ad.Tensor(log_stds, requires_grad=True))
        if self.means.ndim != 2 or self.log_stds.shape != (self.means.shape[0],):
            raise DataError(f"codebook shapes {self.means.shape} / {self.log_stds.shape}")

    @classmethod
    def init(cls, V, d, rng):
        means = rng.normal(scale=INIT_MEAN_SCALE, size=(V, d))
        return cls(means, np.full(V, INIT_LOG_STD))

    @property
    def V(self):
        return self.means.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def parameters(self):
        return {"codebook.means": self.means, "codebook.log_stds": self.log_stds}


def _check_tokens(tokens, V):
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        bad = np.flatnonzero((tokens.reshape(-1) < 0) | (tokens.reshape(-1) >= V))[0]
        raise DataError(f"token id {tokens.reshape(-1)[bad]} at flat position {bad} is outside vocab of size {V}")
    return tokens


def encode(tokens, cb, noise):
    """z_t = mu_{x_t} + sigma_{x_t} * noise_t (differentiable in the codebook).

    ``tokens`` has shape [..., T]; ``noise`` [..., T, d].
    """
    tokens = _check_tokens(tokens, cb.V)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != tokens.shape + (cb.d,):
        raise DataError(f"noise shape {noise.shape} does not match tokens {tokens.shape} x d={cb.d}")
    mu = ad.embedding_lookup(cb.means, tokens)
    ls = ad.embedding_lookup(ad.reshape(cb.log_stds, (cb.V, 1)), tokens)
    sigma = ad.expand(ad.exp(ls), noise.shape)
    return mu + sigma * ad.Tensor(noise)


def component_log_densities(z, means, log_stds):
    """log N(z; mu_k, sigma_k^2 I) for every k. z [..., d] -> [..., V] (NumPy)."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    sq = np.sum((z[..., None, :] - means) ** 2, axis=-1)
    return -0.5 * sq * np.exp(-2.0 * log_stds) - d * log_stds - d * HALF_LOG_2PI


def component_log_densities_t(z, cb):
    """Differentiable version of :func:`component_log_densities`.

    z: Tensor [..., d]. Returns Tensor [..., V].
    """
    lead = z.shape[:-1]
    V, d = cb.V, cb.d
    zz = ad.expand(ad.reshape(z, lead + (1, d)), lead + (V, d))
    mu = ad.expand(cb.means, lead + (V, d))
    diff = zz - mu
    sq = ad.reduce_sum(diff * diff, axis=-1)
    ls = ad.expand(cb.log_stds, lead + (V,))
    inv_var = ad.exp(ls * -2.0)
    return sq * inv_var * -0.5 - ls * float(d) - d * HALF_LOG_2PI


def decode_posterior(z, cb_means, cb_log_stds):
    """p(k | z) as a softmax over component log-densities."""
    lp = component_log_densities(z, cb_means, cb_log_stds)
    lp = lp - lp.max(axis=-1, keepdims=True)
    p = np.exp(lp)
    return p / p.sum(axis=-1, keepdims=True)


def decode(z, cb_means, cb_log_stds, rng=None):
    """Argmax token for each latent, or a posterior sample when ``rng`` is given."""
    post = decode_posterior(z, cb_means, cb_log_stds)
    if rng is None:
        return np.argmax(post, axis=-1)
    flat = post.reshape(-1, post.shape[-1])
    u = rng.random((flat.shape[0], 1))
    idx = np.minimum((u > np.cumsum(flat, axis=1)).sum(1), flat.shape[1] - 1)
    return idx.reshape(post.shape[:-1])


def reconstruction_term(z, cb_means, cb_log_stds):
    """-log sum_j N_j(z) (NumPy)."""
    lp = component_log_densities(z, cb_means, cb_log_stds)
    m = lp.max(axis=-1, keepdims=True)
    return -(np.log(np.exp(lp - m).sum(axis=-1)) + m[..., 0])


def reconstruction_term_t(z, cb):
    """Differentiable -log sum_j N_j(z); z Tensor [..., d] -> [...]."""
    return ad.neg(ad.logsumexp(component_log_densities_t(z, cb), axis=-1))


def log_likelihood_and_posterior(x, z, cb_means, cb_log_stds):
    """(log p(x | z), log q(z | x)) evaluated separately, for identity checks."""
    lp = component_log_densities(z, cb_means, cb_log_stds)
    m = lp.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(lp - m).sum(axis=-1)) + m[..., 0]
    x = np.asarray(x)
    lq = np.take_along_axis(lp, x[..., None], axis=-1)[..., 0]
    return lq - lse, lq
