"""Generation, latent-evolution metrics, the discrete limit probe, FLOPs
models and the change-of-variables toy identities."""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from .bridge import component_log_densities, reconstruction_term
from .conditioners import ConfigError, embed_size
from .flows import (
    MixtureParams1D,
    mix1_forward_batch,
    mix1_inverse_batch,
    mixd_log_pdf_batch,
    mixture_carriers_1d,
)
from .stack import log_normal

EPS_COS = 1e-9
EPS_PR = 1e-12


# -------------------------------------------------------------- generation

@dataclass
class Generation:
    tokens: np.ndarray              # [n, T]
    intermediates: list = None      # decoded h^(0..L), each [n, T]
    latents: list = None            # h^(0..L), patched


def generate(model, n, T, seed=0, temperature=1.0, intermediates=False, sample_decode=False):
    """Draw u ~ N(0, temperature^2 I), invert the stack and decode by argmax."""
    K = model.K
    if T % K or T // K > model.stack_config.positions:
        raise ConfigError(f"length {T} must be a multiple of {K} and at most "
                          f"{model.stack_config.positions * K}")
    rng = np.random.default_rng(seed)
    hs = model.sample_latents(n, T, rng, temperature, intermediates=True)
    dec_rng = np.random.default_rng([seed, 1]) if sample_decode else None
    tokens = model.decode_latents(hs[0], dec_rng)
    if not intermediates:
        return Generation(tokens)
    decoded = [model.decode_latents(h) for h in hs]
    return Generation(tokens, decoded, hs)


def bigram_counts(seqs, V):
    seqs = np.asarray(seqs)
    C = np.zeros((V, V), dtype=np.int64)
    np.add.at(C, (seqs[:, :-1].ravel(), seqs[:, 1:].ravel()), 1)
    return C


def bigram_zscores(counts, P):
    """Per-cell z-scores of transition counts against rows of P (multinomial)."""
    n = counts.sum(1, keepdims=True).astype(np.float64)
    sd = np.sqrt(n * P * (1 - P))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (counts - n * P) / sd, np.where(counts == n * P, 0.0, np.inf))
    return z


# ---------------------------------------------------------- latent metrics

@dataclass
class MetricStat:
    mean: float
    std: float


@dataclass
class LatentMetricsReport:
    mean_l2: list
    mean_pairwise_cos: list
    mean_participation_ratio: list
    mean_centroid_movement: list    # index l-1 for layer l

    def rows(self):
        """CSV rows (layer, metric, mean, std)."""
        out = []
        for name in ("mean_l2", "mean_pairwise_cos", "mean_participation_ratio"):
            for l, s in enumerate(getattr(self, name)):
                out.append((l, name, s.mean, s.std))
        for l, s in enumerate(self.mean_centroid_movement, 1):
            out.append((l, "mean_centroid_movement", s.mean, s.std))
        return out


def _stat(x):
    x = np.asarray(x, dtype=np.float64)
    return MetricStat(float(x.mean()), float(x.std()))


def seq_mean_l2(H):
    """H [B, T, d] -> per-sequence mean token norm [B]."""
    return np.linalg.norm(H, axis=-1).mean(-1)


def seq_pairwise_cos(H):
    """Per-sequence mean cosine over pairs t1 < t2; 1.0 when T <= 1."""
    B, T, _ = H.shape
    if T <= 1:
        return np.ones(B)
    n = np.linalg.norm(H, axis=-1)
    G = np.einsum("btd,bsd->bts", H, H) / (n[:, :, None] * n[:, None, :] + EPS_COS)
    iu = np.triu_indices(T, 1)
    return G[:, iu[0], iu[1]].mean(-1)


def seq_participation_ratio(H):
    """Per-sequence PR of the (T-1)-normalized covariance; 1.0 when T <= 1.

    Uses sum(lambda) = tr(S) and sum(lambda^2) = ||S||_F^2 for symmetric S.
    """
    B, T, _ = H.shape
    if T <= 1:
        return np.ones(B)
    C = H - H.mean(1, keepdims=True)
    S = np.einsum("btd,bte->bde", C, C) / (T - 1)
    tr = np.trace(S, axis1=1, axis2=2)
    fro2 = np.sum(S * S, axis=(1, 2))
    return tr * tr / (fro2 + EPS_PR)


def seq_centroid_movement(H_prev, H):
    return np.linalg.norm(H.mean(1) - H_prev.mean(1), axis=-1)


def latent_metrics(h_seq, token_dim=None):
    """Metrics over states h^(0..L), each [B, T, D].

    When ``token_dim`` is given, patched states [B, S, K*d] are split back
    into per-token vectors [B, S*K, d] first.
    """
    hs = []
    for h in h_seq:
        h = np.asarray(h, dtype=np.float64)
        if token_dim is not None and h.shape[-1] != token_dim:
            h = h.reshape(h.shape[0], -1, token_dim)
        hs.append(h)
    return LatentMetricsReport(
        [_stat(seq_mean_l2(h)) for h in hs],
        [_stat(seq_pairwise_cos(h)) for h in hs],
        [_stat(seq_participation_ratio(h)) for h in hs],
        [_stat(seq_centroid_movement(a, b)) for a, b in zip(hs[:-1], hs[1:])],
    )


# ------------------------------------------------------ discrete AR limit

def limit_codebook(a, sigma, V, d=2):
    """Means a*k along the first axis (neighbour spacing a), common sigma."""
    means = np.zeros((V, d))
    means[:, 0] = a * np.arange(V)
    return means, np.full(V, np.log(sigma))


def elbo_term_l0(x, pi, means, log_stds, noise=None):
    """Per-token ELBO with a tied mixture prior and no flow layers.

    recon(z) + log sum_k pi_k N_k(z) at z = mu_x + sigma_x * noise.
    """
    x = np.atleast_1d(np.asarray(x))
    d = means.shape[1]
    noise = np.zeros((x.size, d)) if noise is None else np.asarray(noise)
    z = means[x] + np.exp(log_stds[x])[:, None] * noise
    logw = np.broadcast_to(np.log(pi), (x.size, pi.size))
    lprior = mixd_log_pdf_batch(z, logw, np.broadcast_to(means, (x.size,) + means.shape),
                                np.broadcast_to(log_stds, logw.shape))
    return reconstruction_term(z, means, log_stds) + lprior


def discrete_limit_probe(a, sigma, pi, d=2):
    """max_x |ELBO term(x) - log pi[x]| at zero encoder noise.

    With r_k = N_k(mu_x) / N_x(mu_x) the gap is
    log1p(sum_{k != x} (pi_k / pi_x - 1) r_k / (1 + sum_{k != x} r_k)),
    evaluated without cancellation so it stays meaningful below 1e-16
    (:func:`elbo_term_l0` gives the same value through the generic path).
    """
    pi = np.asarray(pi, dtype=np.float64)
    means, ls = limit_codebook(a, sigma, pi.size, d)
    gaps = []
    for x in range(pi.size):
        lr = component_log_densities(means[x], means, ls)
        lr = lr - lr[x]
        others = np.arange(pi.size) != x
        r = np.exp(lr[others])
        num = np.sum((pi[others] / pi[x] - 1.0) * r)
        gaps.append(abs(np.log1p(num / (1.0 + r.sum()))))
    return float(max(gaps))


# ------------------------------------------------------------------ FLOPs

GPT2_PRESETS = {
    "gpt2": (12, 768),
    "gpt2-medium": (24, 1024),
    "gpt2-large": (36, 1280),
    "gpt2-xl": (48, 1600),
}
PRESET_S = 1024
PRESET_V = 50257
PRESET_D_MODULE = 128
PRESET_NUM_MIXTURES = 64


def flops_regular(L, d, S, V):
    """Forward FLOPs of a decoder-only transformer over a length-S sequence."""
    return S * (24 * L * d * d + 2 * L * d * S + 4 * d + 2 * d * V)


@dataclass
class FlopsModel:
    L: int
    d_tf: int
    S_base: int
    P: int
    D_module: int = PRESET_D_MODULE
    num_mixtures: int = PRESET_NUM_MIXTURES
    channels_per_token: int = 16

    @property
    def S_special(self):
        return max(1, self.S_base // self.P)

    @property
    def c_in(self):
        return self.channels_per_token * self.P

    @property
    def c_out_per_in(self):
        return 3 * self.num_mixtures

    @property
    def E(self):
        return embed_size(self.D_module, self.c_in)


def flops_module(m):
    E, c, D = m.E, m.c_in, m.D_module
    return 6 * E * (c - 1) ** 2 + D * c * (m.d_tf + E * (c - 1)) + D * c * c * m.c_out_per_in


def flops_body(m):
    S, L, d = m.S_special, m.L, m.d_tf
    return 24 * L * d * d * S + 2 * L * d * S * S + 4 * d * S


def flops_flow(m):
    return flops_body(m) + m.S_special * flops_module(m)


def flops_table(presets=None, patch_sizes=(1, 2, 4), S=PRESET_S, V=PRESET_V):
    """Rows (config, patch_size, regular, flow, ratio)."""
    presets = GPT2_PRESETS if presets is None else presets
    rows = []
    for name, (L, d) in presets.items():
        reg = flops_regular(L, d, S, V)
        for P in patch_sizes:
            fl = flops_flow(FlopsModel(L, d, S, P))
            rows.append((name, P, reg, fl, fl / reg))
    return rows


# ---------------------------------------------- change-of-variables toy

TOY_Q_IN = MixtureParams1D(np.array([0.3, 0.7]), np.array([-1.5, 1.0]), np.log([0.4, 0.8]))
TOY_FLOW = MixtureParams1D(np.array([0.5, 0.2, 0.3]), np.array([-1.0, 0.5, 2.0]),
                           np.log([0.6, 0.3, 0.9]))


def _rows(p, n):
    lw, m, ls = p.batch()
    return (np.broadcast_to(lw, (n, p.V)), np.broadcast_to(m, (n, p.V)),
            np.broadcast_to(ls, (n, p.V)))


def mixture_log_pdf(x, p):
    return mixture_carriers_1d(np.asarray(x, dtype=np.float64), *_rows(p, np.size(x)))[2]


def mixture_sample(p, n, rng):
    k = rng.choice(p.V, size=n, p=p.weights)
    return p.means[k] + p.stds[k] * rng.standard_normal(n)


def flow_apply(x, p):
    return mix1_forward_batch(x, *_rows(p, x.size))


def flow_invert(u, p):
    return mix1_inverse_batch(u, *_rows(p, u.size))


def knn_entropy(x, k=1):
    """Kozachenko-Leonenko differential entropy estimate of 1D samples (nats)."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if k != 1:
        raise ValueError("only k = 1 is implemented")
    gaps = np.diff(x)
    r = np.empty(n)
    r[0], r[-1] = gaps[0], gaps[-1]
    r[1:-1] = np.minimum(gaps[:-1], gaps[1:])
    r = np.maximum(r, np.finfo(float).tiny)
    return float(digamma(n) - digamma(k) + np.log(2.0) + np.mean(np.log(r)))


@dataclass
class KLIdentityResult:
    kl_in: float
    se_in: float
    kl_out: float
    se_out: float
    mean_logdet: float
    entropy_diff: float

    @property
    def z_score(self):
        return abs(self.kl_in - self.kl_out) / np.hypot(self.se_in, self.se_out)

    @property
    def entropy_rel_err(self):
        return abs(self.mean_logdet - self.entropy_diff) / abs(self.mean_logdet)


def kl_identity_toy(n=100_000, seed=0, q_in=TOY_Q_IN, flow=TOY_FLOW):
    """Monte-Carlo check of KL invariance and the entropy change on a 1D toy.

    Two independent sample sets estimate KL(q_in || p_model) in data space
    and KL(q_out || N(0,1)) in base space, where q_out = f#q_in and
    p_model = (f^-1)#N(0,1); the latter evaluates q_out through f^-1.
    """
    rng = np.random.default_rng(seed)

    x = mixture_sample(q_in, n, rng)
    u, ld = flow_apply(x, flow)
    d_in = mixture_log_pdf(x, q_in) - (log_normal(u[:, None]) + ld)

    x2 = mixture_sample(q_in, n, rng)
    u2, _ = flow_apply(x2, flow)
    xr = flow_invert(u2, flow)
    _, ld_r = flow_apply(xr, flow)
    d_out = (mixture_log_pdf(xr, q_in) - ld_r) - log_normal(u2[:, None])

    ent_diff = knn_entropy(u) - knn_entropy(x)
    return KLIdentityResult(float(d_in.mean()), float(d_in.std(ddof=1) / np.sqrt(n)),
                            float(d_out.mean()), float(d_out.std(ddof=1) / np.sqrt(n)),
                            float(ld.mean()), ent_diff)

