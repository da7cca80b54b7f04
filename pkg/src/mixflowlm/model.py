"""Latent flow language model: codebook bridge + flow stack + ELBO."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bridge import Codebook, decode, encode, reconstruction_term_t
from .numerics import NumericError
from .stack import FlowStack, log_normal_t, patch, unpatch

LN2 = math.log(2.0)


class TrainingError(NumericError):
    """Non-finite objective; ``term`` names the offending part."""

    def __init__(self, msg, term=None):
        super().__init__(msg)
        self.term = term


@dataclass
class ObjectiveParts:
    """Per-position pieces of the ELBO (NumPy, nats)."""

    reconstruction: np.ndarray   # [B, T] per token
    base: np.ndarray             # [B, S] log N(u)
    logdet: np.ndarray           # [B, S, L]
    nelbo_bits: float
    trace: object = None


class LatentFlowLM:
    """Tied Gaussian codebook encoder/decoder with a flow prior over latents."""

    def __init__(self, vocab_size, stack_config, rng):
        self.vocab_size = vocab_size
        self.stack_config = stack_config
        self.codebook = Codebook.init(vocab_size, stack_config.latent_dim, rng)
        self.stack = FlowStack(stack_config, rng, self.codebook)

    @property
    def K(self):
        return self.stack_config.patch_size

    @property
    def d(self):
        return self.stack_config.latent_dim

    def parameters(self):
        out = dict(self.codebook.parameters())
        out.update(self.stack.parameters())
        return out

    def n_params(self):
        return sum(p.size for p in self.parameters().values())

    def noise_shape(self, tokens):
        return np.shape(tokens) + (self.d,)

    def objective(self, tokens, noise, trace=False):
        """Mean negative ELBO per token in nats (Tensor) and its parts.

        tokens [B, T] ints, noise [B, T, d] standard normal draws.
        """
        tokens = np.asarray(tokens)
        B, T = tokens.shape
        z = encode(tokens, self.codebook, noise)
        recon = reconstruction_term_t(z, self.codebook)
        h0 = patch(z, self.K)
        u, logdet, tr = self.stack.forward(h0, trace=True)
        base = log_normal_t(u)
        parts = [("reconstruction", recon), ("base", base)]
        for name, t in parts:
            if not np.all(np.isfinite(t.data)):
                raise TrainingError(f"non-finite {name} term", name)
        ld = tr.per_layer_logdet
        if not np.all(np.isfinite(ld)):
            layer = int(np.argwhere(~np.isfinite(ld))[0][-1]) + 1
            raise TrainingError(f"non-finite log-determinant in layer {layer}", f"layer {layer}")
        total = ad.reduce_sum(recon) + ad.reduce_sum(base) + ad.reduce_sum(logdet)
        loss = total * (-1.0 / (B * T))
        info = ObjectiveParts(recon.data, base.data, ld, loss.item() / LN2, tr if trace else None)
        return loss, info

    def nelbo_bits(self, tokens, noise):
        with ad.no_grad():
            return self.objective(tokens, noise)[1].nelbo_bits

    def encode_latents(self, tokens, noise):
        with ad.no_grad():
            return patch(encode(tokens, self.codebook, noise), self.K).data

    def forward_trace(self, tokens, noise):
        with ad.no_grad():
            h0 = patch(encode(tokens, self.codebook, noise), self.K)
            return self.stack.forward(h0, trace=True)[2]

    def decode_latents(self, h, rng=None):
        """Patched latents [B, S, K*d] -> tokens [B, T]."""
        z = unpatch(np.asarray(h), self.K)
        return decode(z, self.codebook.means.data, self.codebook.log_stds.data, rng)

    def sample_latents(self, n, T, rng, temperature=1.0, intermediates=False):
        S = T // self.K
        u = temperature * rng.standard_normal((n, S, self.stack_config.width))
        return self.stack.inverse(u, intermediates=intermediates)

    def base_latents(self, tokens, noise):
        """Push encoded tokens through the stack: u [B, S, K*d]."""
        with ad.no_grad():
            h0 = patch(encode(tokens, self.codebook, noise), self.K)
            return self.stack.forward(h0)[0].data


def zero_noise(model, tokens):
    return np.zeros(model.noise_shape(tokens))


__all__ = ["LatentFlowLM", "ObjectiveParts", "TrainingError", "Tensor", "zero_noise", "LN2"]
