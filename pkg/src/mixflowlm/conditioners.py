"""Networks that predict mixture parameters from context.

* :class:`CausalTransformer` maps a latent sequence to per-position
  features that depend only on strictly earlier positions (in the
  configured direction). Position 0 sees only a learned BOS vector.
* :class:`WeightHead` turns features into mixture log-weights.
* :class:`MaskedMLP` is a MADE-style head emitting per-dimension 1D
  mixture parameters that depend on context and on earlier dimensions.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Invalid model or run configuration."""


LOG_STD_LO = -7.0
LOG_STD_HI = 2.0
_MID = 0.5 * (LOG_STD_LO + LOG_STD_HI)
_HALF = 0.5 * (LOG_STD_HI - LOG_STD_LO)
_OFFSET = math.atanh(-_MID / _HALF)


def bound_log_std(raw):
    """Smooth map of an unconstrained Tensor into (-7, 2); raw = 0 gives 0."""
    return ad.tanh(raw * (1.0 / _HALF) + _OFFSET) * _HALF + _MID


def bound_log_std_np(raw):
    return np.tanh(np.asarray(raw) / _HALF + _OFFSET) * _HALF + _MID


def unbound_log_std(log_std):
    """Inverse of :func:`bound_log_std` (NumPy)."""
    return _HALF * (np.arctanh((np.asarray(log_std) - _MID) / _HALF) - _OFFSET)


class Module:
    """Minimal parameter container; subclasses register Tensors and children."""

    def __init__(self):
        self._tensors = {}
        self._children = {}

    def param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def parameters(self, prefix=""):
        out = {}
        for k, v in self._tensors.items():
            out[prefix + k] = v
        for k, m in self._children.items():
            out.update(m.parameters(prefix + k + "."))
        return out


def _glorot(rng, n_in, n_out):
    return rng.normal(scale=1.0 / math.sqrt(max(n_in, 1)), size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, mask=None):
        super().__init__()
        self.W = self.param("W", np.zeros((n_in, n_out)) if zero else _glorot(rng, n_in, n_out))
        self.b = self.param("b", np.zeros(n_out))
        self.mask = None if mask is None else Tensor(mask.astype(np.float64))
        if mask is not None:
            self.W.data *= mask

    def __call__(self, x):
        W = self.W if self.mask is None else self.W * self.mask
        return ad.affine(x, W, self.b)


class LayerNorm(Module):
    def __init__(self, n):
        super().__init__()
        self.g = self.param("g", np.ones(n))
        self.b = self.param("b", np.zeros(n))

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


@dataclass
class CausalTransformerConfig:
    n_layers: int = 1
    d_model: int = 64
    n_heads: int = 4
    ffn_ratio: int = 4
    max_seq_len: int = 64
    direction: str = "l2r"

    def validate(self):
        for f in ("n_layers", "d_model", "n_heads", "ffn_ratio", "max_seq_len"):
            if getattr(self, f) < 1 and not (f == "n_layers" and self.n_layers == 0):
                raise ConfigError(f"transformer {f} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.direction not in ("l2r", "r2l"):
            raise ConfigError(f"direction must be l2r or r2l, got {self.direction!r}")


class Block(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        dm = cfg.d_model
        self.h = cfg.n_heads
        self.ln1 = self.child("ln1", LayerNorm(dm))
        self.qkv = self.child("qkv", Linear(dm, 3 * dm, rng))
        self.proj = self.child("proj", Linear(dm, dm, rng))
        self.ln2 = self.child("ln2", LayerNorm(dm))
        self.fc1 = self.child("fc1", Linear(dm, cfg.ffn_ratio * dm, rng))
        self.fc2 = self.child("fc2", Linear(cfg.ffn_ratio * dm, dm, rng))
        self.proj.W.data *= 0.5
        self.fc2.W.data *= 0.5

    def __call__(self, x, mask):
        B, T, dm = x.shape
        hd = dm // self.h
        qkv = self.qkv(self.ln1(x))
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, self.h, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        att = ad.softmax(ad.masked_fill(att, mask, -np.inf), axis=-1)
        y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, dm))
        x = x + self.proj(y)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class CausalTransformer(Module):
    """Shifted-input causal transformer over positions.

    Output at position t is a function of inputs at positions strictly
    before t (in direction order).
    """

    def __init__(self, cfg, d_in, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dm = cfg.d_model
        self.inp = self.child("inp", Linear(d_in, dm, rng))
        self.bos = self.param("bos", rng.normal(scale=0.02, size=dm))
        self.pos = self.param("pos", rng.normal(scale=0.02, size=(cfg.max_seq_len, dm)))
        self.blocks = [self.child(f"block{i}", Block(cfg, rng)) for i in range(cfg.n_layers)]
        self.ln_f = self.child("ln_f", LayerNorm(dm))

    def core(self, x):
        """Left-to-right features for x [B, T, d_in]."""
        B, T, _ = x.shape
        if T > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        dm = self.cfg.d_model
        bos = ad.expand(ad.reshape(self.bos, (1, 1, dm)), (B, 1, dm))
        if T > 1:
            h = ad.concat([bos, self.inp(x[:, :-1])], axis=1)
        else:
            h = bos
        h = ad.add_bias(h, self.pos[:T])
        mask = np.triu(np.ones((T, T), dtype=bool), 1)
        for blk in self.blocks:
            h = blk(h, mask)
        return self.ln_f(h)

    def __call__(self, x):
        if self.cfg.direction == "r2l":
            return ad.flip(self.core(ad.flip(x, 1)), 1)
        return self.core(x)


class WeightHead(Module):
    """Mixture log-weights [..., slots, V] from features; zero-initialized."""

    def __init__(self, d_model, V, rng, slots=1):
        super().__init__()
        self.V, self.slots = V, slots
        self.lin = self.child("lin", Linear(d_model, slots * V, rng, zero=True))

    def __call__(self, ctx):
        lead = ctx.shape[:-1]
        logits = ad.reshape(self.lin(ctx), lead + (self.slots, self.V))
        return ad.log_softmax(logits, axis=-1)


def embed_size(hidden_size, in_channels):
    """Per-dimension feature width E of the masked MLP."""
    if in_channels <= 1:
        return 0
    return min(max(1, (9 * hidden_size) // (16 * (in_channels - 1))), 96)


@dataclass
class MaskedMLPConfig:
    in_channels: int
    hidden_size: int = 64
    num_mixtures: int = 4

    @property
    def embed_size(self):
        return embed_size(self.hidden_size, self.in_channels)


class MaskedMLP(Module):
    """Dimension-wise autoregressive mixture head.

    Three masked linear layers (in_to_features, features_to_hidden,
    hidden_to_out) with GELU in between. Output for dimension i depends
    on the context vector and on input dimensions < i only.
    """

    N_FEAT = 3  # per-dimension input featurization: x, tanh(x), exp(-x^2/2)

    def __init__(self, cfg, d_ctx, rng, mean_spread=1.0):
        super().__init__()
        self.cfg = cfg
        c, V = cfg.in_channels, cfg.num_mixtures
        E = cfg.embed_size
        H2 = max(1, cfg.hidden_size // 2)
        self.E, self.H2, self.d_ctx = E, H2, d_ctx
        if c > 1:
            # input group j (features of x_j, j < c-1) -> feature group j
            m1 = np.zeros((self.N_FEAT * (c - 1), E * (c - 1)), dtype=bool)
            for j in range(c - 1):
                for g in range(j, c - 1):
                    m1[j * self.N_FEAT:(j + 1) * self.N_FEAT, g * E:(g + 1) * E] = True
            self.in_to_features = self.child(
                "in_to_features", Linear(self.N_FEAT * (c - 1), E * (c - 1), rng, mask=m1))
        # feature group g has seen x_{<=g}; hidden group i may use g < i
        m2 = np.zeros((d_ctx + E * (c - 1), H2 * c), dtype=bool)
        m2[:d_ctx, :] = True
        for g in range(c - 1):
            for i in range(g + 1, c):
                m2[d_ctx + g * E:d_ctx + (g + 1) * E, i * H2:(i + 1) * H2] = True
        self.features_to_hidden = self.child(
            "features_to_hidden", Linear(d_ctx + E * (c - 1), H2 * c, rng, mask=m2))
        m3 = np.zeros((H2 * c, 3 * V * c), dtype=bool)
        for i in range(c):
            for o in range(i, c):
                m3[i * H2:(i + 1) * H2, o * 3 * V:(o + 1) * 3 * V] = True
        self.hidden_to_out = self.child(
            "hidden_to_out", Linear(H2 * c, 3 * V * c, rng, zero=True, mask=m3))
        bias = np.zeros((c, 3, V))
        bias[:, 1, :] = np.linspace(-mean_spread, mean_spread, V) if V > 1 else 0.0
        self.hidden_to_out.b.data[:] = bias.reshape(-1)

    def n_params(self):
        return sum(p.size for p in self.parameters().values())

    def __call__(self, ctx, x):
        """ctx [..., d_ctx], x [..., c] -> (logw, means, log_stds) each [..., c, V]."""
        c, V = self.cfg.in_channels, self.cfg.num_mixtures
        lead = x.shape[:-1]
        if c > 1:
            xp = x[..., :c - 1]
            feats = ad.concat([xp, ad.tanh(xp), ad.exp(ad.square(xp) * -0.5)], axis=-1)
            # reorder to per-dimension groups [x_j, tanh x_j, g(x_j)]
            feats = ad.reshape(ad.transpose(ad.reshape(feats, lead + (self.N_FEAT, c - 1)),
                                            tuple(range(len(lead))) + (len(lead) + 1, len(lead))),
                               lead + (self.N_FEAT * (c - 1),))
            f = ad.gelu(self.in_to_features(feats))
            hin = ad.concat([ctx, f], axis=-1)
        else:
            hin = ctx
        h = ad.gelu(self.features_to_hidden(hin))
        out = ad.reshape(self.hidden_to_out(h), lead + (c, 3, V))
        logw = ad.log_softmax(out[..., 0, :], axis=-1)
        means = out[..., 1, :]
        log_stds = bound_log_std(out[..., 2, :])
        return logw, means, log_stds


class ParamHead(Module):
    """Per-position dense parameters from context (zero-initialized)."""

    def __init__(self, d_ctx, n_out, rng, bias=None):
        super().__init__()
        self.lin = self.child("lin", Linear(d_ctx, n_out, rng, zero=True))
        if bias is not None:
            self.lin.b.data[:] = bias

    def __call__(self, ctx):
        return self.lin(ctx)
