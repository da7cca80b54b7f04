"""Stacked autoregressive flows over a latent sequence.

A stack maps the (patched) encoder output h^(0) = z through layers
h^(l) = f_l(h^(l-1)) to the base variable u = h^(L). Each layer is
autoregressive over positions in its own direction: the parameters used
at position t come from a causal transformer over h^(l-1) at earlier
positions. Three layer kinds are provided:

* ``mixd``   token-wise d-dimensional isotropic mixture, Rosenblatt map;
  optionally tied to the encoder codebook (one slot per patched token);
* ``mix1``   dimension-wise 1D mixtures from a masked MLP head, CDF map;
* ``affine`` Gaussian (shift/scale) coupling, mostly for tests and baselines.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bridge import DataError
from .conditioners import (
    CausalTransformer,
    CausalTransformerConfig,
    ConfigError,
    MaskedMLP,
    MaskedMLPConfig,
    Module,
    ParamHead,
    WeightHead,
    bound_log_std,
)
from .flows import (
    mix1_flow,
    mix1_inverse_batch,
    mixd_flow,
    mixd_inverse_batch,
    mixd_log_pdf_batch,
    mixture_carriers_1d,
)
from .numerics import HALF_LOG_2PI, NumericError

KINDS = ("mix1", "mixd", "affine")
DIRECTIONS = ("l2r", "r2l")
UNTIED_MEAN_SCALE = 0.01


# ------------------------------------------------------------ permutations

def patch(z, K):
    """[..., T, d] -> [..., T/K, K*d], grouping K consecutive tokens."""
    T, d = z.shape[-2:]
    if K < 1 or T % K:
        raise DataError(f"sequence length {T} is not divisible by patch size {K}")
    shape = z.shape[:-2] + (T // K, K * d)
    return ad.reshape(z, shape) if isinstance(z, Tensor) else np.reshape(z, shape)


def unpatch(h, K):
    """Inverse of :func:`patch`."""
    S, D = h.shape[-2:]
    if K < 1 or D % K:
        raise DataError(f"width {D} is not divisible by patch size {K}")
    shape = h.shape[:-2] + (S * K, D // K)
    return ad.reshape(h, shape) if isinstance(h, Tensor) else np.reshape(h, shape)


def mix_permutation(D):
    """Index array of the channel mix: even channels first, then odd."""
    return np.concatenate([np.arange(0, D, 2), np.arange(1, D, 2)])


def channel_mix(x):
    """Even-index entries of the last axis followed by odd-index entries."""
    perm = mix_permutation(x.shape[-1])
    if isinstance(x, Tensor):
        return x[..., perm]
    return np.asarray(x)[..., perm]


def channel_unmix(x):
    """Inverse of :func:`channel_mix`; the last axis must have even length."""
    D = x.shape[-1]
    if D % 2:
        raise ConfigError(f"channel unmix needs an even number of channels, got {D}")
    inv = np.argsort(mix_permutation(D))
    if isinstance(x, Tensor):
        return x[..., inv]
    return np.asarray(x)[..., inv]


# ------------------------------------------------------------------ config

@dataclass
class LayerSpec:
    kind: str = "mixd"
    direction: str = "l2r"
    V: int = 4
    n_layers: int = 1
    d_model: int = 64
    n_heads: int = 4
    ffn_ratio: int = 4
    mlp_hidden: int = 64
    channel_mix_after: bool = False
    tie_codebook: bool = False
    context_means: bool = False


@dataclass
class FlowStackConfig:
    layers: list = field(default_factory=list)
    latent_dim: int = 4
    patch_size: int = 1
    max_tokens: int = 64
    progressive_blocks: list = field(default_factory=list)
    progressive_steps: list = field(default_factory=list)

    @property
    def width(self):
        return self.latent_dim * self.patch_size

    @property
    def positions(self):
        return self.max_tokens // self.patch_size

    def blocks(self):
        """Progressive blocks as lists of 1-based layer indices."""
        L = len(self.layers)
        if not self.progressive_blocks:
            return [list(range(1, L + 1))]
        return [list(b) for b in self.progressive_blocks]

    def validate(self, vocab_size=None):
        if self.latent_dim < 1 or self.patch_size < 1:
            raise ConfigError("latent_dim and patch_size must be positive")
        if self.max_tokens % self.patch_size:
            raise ConfigError(f"max_tokens {self.max_tokens} not divisible by patch_size {self.patch_size}")
        for i, spec in enumerate(self.layers, 1):
            if spec.kind not in KINDS:
                raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
            if spec.direction not in DIRECTIONS:
                raise ConfigError(f"layer {i}: unknown direction {spec.direction!r}")
            if spec.V < 1:
                raise ConfigError(f"layer {i}: V must be positive")
            if spec.tie_codebook:
                if i != 1 or spec.kind != "mixd":
                    raise ConfigError(f"layer {i}: codebook tying is only allowed on a first mixd layer")
                if vocab_size is not None and spec.V != vocab_size:
                    raise ConfigError(f"layer {i}: tied V={spec.V} differs from vocab size {vocab_size}")
            if spec.channel_mix_after and self.width % 2:
                raise ConfigError(f"layer {i}: channel mixing needs an even width, got {self.width}")
            CausalTransformerConfig(spec.n_layers, spec.d_model, spec.n_heads, spec.ffn_ratio,
                                    self.positions, "l2r").validate()
        blocks = self.blocks()
        flat = [i for b in blocks for i in b]
        if flat != list(range(1, len(self.layers) + 1)) and self.layers:
            raise ConfigError(f"progressive blocks {blocks} must partition layers 1..{len(self.layers)} in order")
        if len(self.progressive_steps) != max(len(blocks) - 1, 0):
            raise ConfigError("need one step threshold per block boundary")
        if any(b <= a for a, b in zip(self.progressive_steps, self.progressive_steps[1:])):
            raise ConfigError("progressive step thresholds must increase")


def progressive_schedule(config, step):
    """1-based indices of the layers trained at ``step``, and the block number (0-based)."""
    blocks = config.blocks()
    b = int(sum(step >= s for s in config.progressive_steps))
    b = min(b, len(blocks) - 1)
    return set(blocks[b]), b


# ------------------------------------------------------------------ layers

def _log_normal(x):
    return -0.5 * np.sum(x * x, axis=-1) - x.shape[-1] * HALF_LOG_2PI


class FlowLayer(Module):
    """Shared plumbing: conditioner, direction handling, sequential inverse."""

    slots = 1

    def __init__(self, spec, width, positions, rng):
        super().__init__()
        self.spec = spec
        self.width = width
        cfg = CausalTransformerConfig(spec.n_layers, spec.d_model, spec.n_heads, spec.ffn_ratio,
                                      positions, spec.direction)
        self.transformer = self.child("transformer", CausalTransformer(cfg, width, rng))

    def forward(self, h):
        """h Tensor [B,S,D] -> (u Tensor [B,S,D], log_det Tensor [B,S])."""
        ctx = self.transformer(h)
        B, S, D = h.shape
        u, ld = self._transform(ctx, h, (B, S))
        return u, ld

    def log_mix(self, h):
        """Direct log density of h under the layer's conditional mixture, [B,S]."""
        with ad.no_grad():
            h = Tensor(np.asarray(h))
            ctx = self.transformer(h)
            return self._log_mix(ctx, h, h.shape[:2])

    def inverse(self, u):
        """u [B,S,D] -> h, position by position in this layer's direction."""
        u = np.asarray(u, dtype=np.float64)
        flip = self.spec.direction == "r2l"
        if flip:
            u = u[:, ::-1]
        B, S, D = u.shape
        h = np.zeros_like(u)
        with ad.no_grad():
            for t in range(S):
                ctx = self.transformer.core(Tensor(h[:, :t + 1])).data[:, t]
                try:
                    h[:, t] = self._invert_position(ctx, u[:, t])
                except NumericError as e:
                    pos = S - 1 - t if flip else t
                    row = None if e.row is None else e.row // self.slots
                    raise type(e)(f"position {pos}, sequence {row}, dim {e.dim}: {e}", row, e.dim) from e
        return h[:, ::-1].copy() if flip else h


class MixDLayer(FlowLayer):
    """Token-wise isotropic d-D mixture with Rosenblatt transform."""

    def __init__(self, spec, width, positions, rng, codebook=None, slot_dim=None):
        super().__init__(spec, width, positions, rng)
        V = spec.V
        self.codebook = codebook if spec.tie_codebook else None
        if self.codebook is not None:
            self.slot_dim = slot_dim
            self.slots = width // slot_dim
        else:
            self.slot_dim = width
            self.slots = 1
        self.weights = self.child("weights", WeightHead(spec.d_model, V, rng, self.slots))
        if self.codebook is None:
            init = rng.normal(scale=UNTIED_MEAN_SCALE, size=(V, width))
            if spec.context_means:
                self.mean_head = self.child("mean_head", ParamHead(spec.d_model, V * width, rng,
                                                                   bias=init.reshape(-1)))
            else:
                self.means = self.param("means", init)
            self.raw_log_stds = self.param("raw_log_stds", np.zeros(V))

    def _params(self, ctx):
        """Row-flattened (logw [N,V], means [N,V,d], log_stds [N,V]) Tensors."""
        V, d = self.spec.V, self.slot_dim
        lead = ctx.shape[:-1]
        N = int(np.prod(lead)) * self.slots
        logw = ad.reshape(self.weights(ctx), (N, V))
        if self.codebook is not None:
            means = ad.expand(self.codebook.means, (N, V, d))
            ls = ad.expand(self.codebook.log_stds, (N, V))
        else:
            if self.spec.context_means:
                means = ad.reshape(self.mean_head(ctx), (N, V, d))
            else:
                means = ad.expand(self.means, (N, V, d))
            ls = ad.expand(bound_log_std(self.raw_log_stds), (N, V))
        return logw, means, ls

    def _transform(self, ctx, h, lead):
        logw, means, ls = self._params(ctx)
        N = logw.shape[0]
        u, ld = mixd_flow(ad.reshape(h, (N, self.slot_dim)), logw, means, ls)
        u = ad.reshape(u, lead + (self.width,))
        ld = ad.reduce_sum(ad.reshape(ld, lead + (self.slots,)), axis=-1)
        return u, ld

    def _log_mix(self, ctx, h, lead):
        logw, means, ls = self._params(ctx)
        N = logw.shape[0]
        lp = mixd_log_pdf_batch(h.data.reshape(N, self.slot_dim), logw.data, means.data, ls.data)
        return lp.reshape(lead + (self.slots,)).sum(-1)

    def _invert_position(self, ctx, u):
        logw, means, ls = self._params(Tensor(ctx))
        N = logw.shape[0]
        z = mixd_inverse_batch(u.reshape(N, self.slot_dim), logw.data, means.data, ls.data)
        return z.reshape(u.shape)


class Mix1Layer(FlowLayer):
    """Dimension-wise 1D mixtures (masked MLP head) with CDF transform."""

    def __init__(self, spec, width, positions, rng):
        super().__init__(spec, width, positions, rng)
        cfg = MaskedMLPConfig(in_channels=width, hidden_size=spec.mlp_hidden, num_mixtures=spec.V)
        self.head = self.child("head", MaskedMLP(cfg, spec.d_model, rng))

    def _rows(self, ctx, h):
        logw, means, ls = self.head(ctx, h)
        N = int(np.prod(h.shape))
        V = self.spec.V
        return (ad.reshape(logw, (N, V)), ad.reshape(means, (N, V)), ad.reshape(ls, (N, V)))

    def _transform(self, ctx, h, lead):
        logw, means, ls = self._rows(ctx, h)
        N = logw.shape[0]
        u, ld = mix1_flow(ad.reshape(h, (N,)), logw, means, ls)
        u = ad.reshape(u, lead + (self.width,))
        ld = ad.reduce_sum(ad.reshape(ld, lead + (self.width,)), axis=-1)
        return u, ld

    def _log_mix(self, ctx, h, lead):
        logw, means, ls = self._rows(ctx, h)
        _, _, lp = mixture_carriers_1d(h.data.reshape(-1), logw.data, means.data, ls.data)
        return lp.reshape(lead + (self.width,)).sum(-1)

    def _invert_position(self, ctx, u):
        B, D = u.shape
        x = np.zeros_like(u)
        c = Tensor(ctx)
        for i in range(D):
            logw, means, ls = self.head(c, Tensor(x))
            try:
                x[:, i] = mix1_inverse_batch(u[:, i], logw.data[:, i], means.data[:, i], ls.data[:, i])
            except NumericError as e:
                raise type(e)(str(e), e.row, i) from e
        return x


class AffineLayer(FlowLayer):
    """Gaussian autoregressive coupling u = (h - shift) / scale."""

    def __init__(self, spec, width, positions, rng):
        super().__init__(spec, width, positions, rng)
        self.head = self.child("head", ParamHead(spec.d_model, 2 * width, rng))

    def _params(self, ctx):
        p = self.head(ctx)
        D = self.width
        return p[..., :D], bound_log_std(p[..., D:])

    def _transform(self, ctx, h, lead):
        shift, ls = self._params(ctx)
        u = (h - shift) * ad.exp(ad.neg(ls))
        return u, ad.neg(ad.reduce_sum(ls, axis=-1))

    def _log_mix(self, ctx, h, lead):
        shift, ls = self._params(ctx)
        x = (h.data - shift.data) / np.exp(ls.data)
        return _log_normal(x) - ls.data.sum(-1)

    def _invert_position(self, ctx, u):
        shift, ls = self._params(Tensor(ctx))
        return u * np.exp(ls.data) + shift.data


# ------------------------------------------------------------------- stack

@dataclass
class StackTrace:
    """States h^(0..L) and per-layer log-det / direct log-mixture densities.

    ``per_layer_logdet`` and ``per_layer_logmix`` have shape [B, S, L].
    """

    h_seq: list
    per_layer_logdet: np.ndarray
    per_layer_logmix: np.ndarray


class FlowStack(Module):
    def __init__(self, config, rng, codebook=None):
        super().__init__()
        vocab = codebook.V if codebook is not None else None
        config.validate(vocab)
        self.config = config
        W, S = config.width, config.positions
        self.layers = []
        for i, spec in enumerate(config.layers, 1):
            if spec.kind == "mixd":
                if spec.tie_codebook and codebook is None:
                    raise ConfigError("tied layer needs a codebook")
                layer = MixDLayer(spec, W, S, rng, codebook, config.latent_dim)
            elif spec.kind == "mix1":
                layer = Mix1Layer(spec, W, S, rng)
            else:
                layer = AffineLayer(spec, W, S, rng)
            self.layers.append(self.child(f"layer{i}", layer))

    def _mixes(self):
        L = len(self.layers)
        return [spec.channel_mix_after and i < L - 1 for i, spec in enumerate(self.config.layers)]

    def forward(self, h, trace=False):
        """h Tensor [B,S,D] -> (u, total log_det [B,S], StackTrace or None)."""
        B, S = h.shape[:2]
        total = None
        hs, lds, lms = [h.data], [], []
        for i, (layer, mix) in enumerate(zip(self.layers, self._mixes()), 1):
            h_in = h
            try:
                h, ld = layer.forward(h)
            except NumericError as e:
                raise self._locate(e, i, layer, B, S) from e
            if trace:
                lms.append(layer.log_mix(h_in.data))
                lds.append(ld.data)
            if mix:
                h = channel_mix(h)
            total = ld if total is None else total + ld
            hs.append(h.data)
        if total is None:
            total = Tensor(np.zeros((B, S)))
        tr = None
        if trace:
            L = len(self.layers)
            tr = StackTrace(hs, np.stack(lds, -1) if L else np.zeros((B, S, 0)),
                            np.stack(lms, -1) if L else np.zeros((B, S, 0)))
        return h, total, tr

    @staticmethod
    def _locate(e, i, layer, B, S):
        if e.row is None:
            return type(e)(f"layer {i}: {e}", None, e.dim)
        per_pos = layer.slots if isinstance(layer, MixDLayer) else layer.width
        r = e.row // per_pos
        dim = e.dim if isinstance(layer, MixDLayer) else e.row % per_pos
        b, t = divmod(r, S)
        return type(e)(f"layer {i}, sequence {b}, position {t}, dim {dim}: {e}", e.row, dim)

    def inverse(self, u, intermediates=False):
        """Invert the stack. Returns h^(0), or the list h^(0..L) when requested."""
        h = np.asarray(u, dtype=np.float64)
        out = [h]
        for i, (layer, mix) in reversed(list(enumerate(zip(self.layers, self._mixes()), 1))):
            if mix:
                h = channel_unmix(h)
            try:
                h = layer.inverse(h)
            except NumericError as e:
                raise type(e)(f"layer {i}: {e}", e.row, e.dim) from e
            out.append(h)
        return out[::-1] if intermediates else h

    def layer_parameters(self, index):
        """Parameters owned by layer ``index`` (1-based); tied codebook excluded."""
        return self.layers[index - 1].parameters(f"layer{index}.")


def log_normal(u):
    """log N(u; 0, I) over the last axis (NumPy)."""
    return _log_normal(np.asarray(u))


def log_normal_t(u):
    """Differentiable log N(u; 0, I) over the last axis."""
    D = u.shape[-1]
    return ad.reduce_sum(ad.square(u), axis=-1) * -0.5 - D * HALF_LOG_2PI
