"""Self-contained property suites runnable from the command line.

Each suite returns a list of :class:`Check` results; a check is a named
property evaluated over a number of random cases.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import (
    discrete_limit_probe,
    elbo_term_l0,
    kl_identity_toy,
    limit_codebook,
    seq_participation_ratio,
)
from .bridge import Codebook, log_likelihood_and_posterior, reconstruction_term
from .flows import (
    mix1_flow,
    mix1_forward_batch,
    mix1_inverse_batch,
    mixd_flow,
    mixd_forward_batch,
    mixd_inverse_batch,
    mixd_log_pdf_batch,
)
from .model import LatentFlowLM
from .stack import FlowStackConfig, LayerSpec, channel_mix, channel_unmix, log_normal


@dataclass
class Check:
    name: str
    passed: int
    total: int
    worst: float = 0.0

    @property
    def ok(self):
        return self.passed == self.total


def _rows(rng, n, V, d):
    logw = rng.normal(size=(n, V))
    means = rng.normal(scale=1.5, size=(n, V, d))
    ls = rng.uniform(-1.2, 0.5, size=(n, V))
    return logw, means, ls


def _sample_rows(rng, logw, means, ls):
    n, V, d = means.shape
    w = np.exp(logw - logw.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    k = (rng.random((n, 1)) > np.cumsum(w, 1)).sum(1).clip(0, V - 1)
    idx = np.arange(n)
    return means[idx, k] + np.exp(ls[idx, k])[:, None] * rng.standard_normal((n, d))


def _count(name, errs, tol):
    errs = np.asarray(errs, dtype=np.float64).ravel()
    return Check(name, int(np.sum(errs <= tol)), errs.size, float(np.max(errs)) if errs.size else 0.0)


def suite_flows(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    lw, m, ls = _rows(rng, 2000, 5, 1)
    z = _sample_rows(rng, lw, m, ls)[:, 0]
    u, ld = mix1_forward_batch(z, lw, m[:, :, 0], ls)
    lp = mixd_log_pdf_batch(z[:, None], lw, m, ls)
    out.append(_count("mix1 exactness", np.abs(lp - log_normal(u[:, None]) - ld), 1e-10))
    zr = mix1_inverse_batch(u, lw, m[:, :, 0], ls)
    out.append(_count("mix1 round trip", np.abs(zr - z), 1e-7))
    for d in (2, 3, 5):
        lw, m, ls = _rows(rng, 300, 4, d)
        z = _sample_rows(rng, lw, m, ls)
        u, lp = mixd_forward_batch(z, lw, m, ls)
        direct = mixd_log_pdf_batch(z, lw, m, ls)
        out.append(_count(f"mixd d={d} density", np.abs(lp - direct), 1e-10))
        zr = mixd_inverse_batch(u, lw, m, ls)
        out.append(_count(f"mixd d={d} round trip", np.abs(zr - z).max(1), 1e-6))
    x = rng.normal(size=(100, 6))
    out.append(_count("channel mix round trip", np.abs(channel_unmix(channel_mix(x)) - x).max(1), 0.0))
    return out


def _fd_suite(name, fn, inputs, n_seeds, tol):
    errs = []
    for s in range(n_seeds):
        (a, f), = ad.check_grad(fn, inputs(s), seed=s)
        errs.append(ad.rel_error(a, f))
    return _count(name, errs, tol)


def suite_autodiff(seed=0):
    rng = np.random.default_rng(seed)
    out = []

    def rnd(*shape):
        return rng.normal(size=shape)

    unary = {
        "exp": ad.exp, "tanh": ad.tanh, "gelu": ad.gelu, "softplus": ad.softplus,
        "softmax": lambda a: ad.softmax(a) * ad.Tensor(np.arange(12.0).reshape(3, 4)),
        "log_softmax": lambda a: ad.log_softmax(a) * ad.Tensor(np.arange(12.0).reshape(3, 4)),
        "logsumexp": lambda a: ad.logsumexp(a, axis=-1),
        "square": ad.square,
    }
    for name, f in unary.items():
        out.append(_fd_suite(name, lambda a, f=f: ad.reduce_sum(f(a)), lambda s: [rnd(3, 4)], 5, 1e-4))
    out.append(_fd_suite("matmul", lambda a, b: ad.reduce_sum(ad.tanh(ad.matmul(a, b))),
                         lambda s: [rnd(3, 4), rnd(4, 2)], 5, 1e-4))
    out.append(_fd_suite("layer_norm", lambda a, g, b: ad.reduce_sum(ad.tanh(ad.layer_norm(a, g, b))),
                         lambda s: [rnd(3, 5), rnd(5), rnd(5)], 5, 1e-4))

    def mixd_loss(z, lw, m, ls):
        u, ld = mixd_flow(z, lw, m, ls)
        return ad.reduce_sum(ad.tanh(u)) + ad.reduce_sum(ld)

    def mixd_inputs(s):
        r = np.random.default_rng([seed, s])
        lw, m, ls = _rows(r, 4, 3, 3)
        return [_sample_rows(r, lw, m, ls), lw, m, ls]

    out.append(_fd_suite("mixd_flow gradient", mixd_loss, mixd_inputs, 10, 1e-4))

    def mix1_loss(z, lw, m, ls):
        u, ld = mix1_flow(z, lw, m, ls)
        return ad.reduce_sum(ad.tanh(u)) + ad.reduce_sum(ld)

    def mix1_inputs(s):
        r = np.random.default_rng([seed, s, 1])
        lw, m, ls = _rows(r, 6, 3, 1)
        return [_sample_rows(r, lw, m, ls)[:, 0], lw, m[:, :, 0], ls]

    out.append(_fd_suite("mix1_flow gradient", mix1_loss, mix1_inputs, 10, 1e-4))
    return out


def small_model(seed=0, kinds=("mixd", "mixd"), T=8, d=3, V=5, K=1, mix=False):
    layers = [LayerSpec(kind=k, direction=("l2r", "r2l")[i % 2], V=V, d_model=16, n_heads=2,
                        mlp_hidden=16, tie_codebook=(i == 0 and k == "mixd"),
                        channel_mix_after=mix) for i, k in enumerate(kinds)]
    cfg = FlowStackConfig(layers=layers, latent_dim=d, patch_size=K, max_tokens=T)
    rng = np.random.default_rng(seed)
    model = LatentFlowLM(V, cfg, rng)
    for p in model.stack.parameters().values():
        p.data += rng.normal(scale=0.05, size=p.shape)
    return model


def suite_elbo(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    errs = []
    for _ in range(200):
        V, d = rng.integers(1, 30), rng.integers(1, 6)
        cb = Codebook.init(V, d, rng)
        x = rng.integers(0, V)
        z = rng.normal(size=d)
        lpx, lq = log_likelihood_and_posterior(x, z, cb.means.data, cb.log_stds.data)
        errs.append(abs(lpx - lq - reconstruction_term(z, cb.means.data, cb.log_stds.data)))
    out.append(_count("collapse identity", errs, 1e-12))

    model = small_model(seed, kinds=("mixd", "mix1", "affine"), d=2, mix=True)
    toks = rng.integers(0, 5, size=(4, 8))
    noise = rng.standard_normal((4, 8, 2))
    tr = model.forward_trace(toks, noise)
    errs = []
    for l in range(3):
        hn = tr.h_seq[l + 1]
        if l < 2:
            hn = channel_unmix(hn)
        errs.append(np.abs(tr.per_layer_logmix[..., l] - log_normal(hn) - tr.per_layer_logdet[..., l]))
    out.append(_count("per-layer density identity", np.concatenate([e.ravel() for e in errs]), 1e-10))
    back = model.stack.inverse(tr.h_seq[-1])
    out.append(_count("stack round trip", np.abs(back - tr.h_seq[0]).max(-1), 1e-5))

    model = small_model(seed + 1, kinds=("mixd", "mixd"), T=8, d=3)
    toks = rng.integers(0, 5, size=(2, 8))
    noise = rng.standard_normal((2, 8, 3))
    params = model.parameters()
    names = sorted(params)
    picks = [names[i] for i in rng.choice(len(names), size=10, replace=False)]
    loss, _ = model.objective(toks, noise)
    loss.backward()
    errs = []
    h = 1e-5
    for name in picks:
        p = params[name]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        g = p.grad[idx] if p.grad is not None else 0.0
        old = p.data[idx]
        p.data[idx] = old + h
        fp = model.nelbo_bits(toks, noise)
        p.data[idx] = old - h
        fm = model.nelbo_bits(toks, noise)
        p.data[idx] = old
        fd = (fp - fm) / (2 * h) * np.log(2.0)
        errs.append(ad.rel_error(g, fd, floor=1e-6))
    out.append(_count("end-to-end NELBO gradient", errs, 1e-3))
    return out


def suite_limit(seed=0):
    rng = np.random.default_rng(seed)
    pis = rng.dirichlet(np.ones(4), size=20)
    gaps = [discrete_limit_probe(1.0, 1e-3, pi) for pi in pis]
    out = [_count("limit gap at sigma=1e-3", gaps, 1e-3)]
    mono = []
    for pi in pis:
        g = [discrete_limit_probe(1.0, s, pi) for s in (0.3, 0.1, 0.01, 1e-3)]
        mono.append(0.0 if all(b <= a for a, b in zip(g, g[1:])) and g[0] > g[1] else 1.0)
    out.append(_count("gap monotone in sigma", mono, 0.0))
    errs = []
    for pi in pis:
        means, ls = limit_codebook(1.0, 0.3, 4)
        direct = np.log([np.sum(pi * np.exp(-0.5 * np.sum((means[x] - means) ** 2, 1) / 0.09))
                         / np.sum(np.exp(-0.5 * np.sum((means[x] - means) ** 2, 1) / 0.09))
                         for x in range(4)])
        errs.append(np.abs(elbo_term_l0(np.arange(4), pi, means, ls) - direct).max())
    out.append(_count("ELBO term vs posterior average", errs, 1e-12))
    return out


def suite_klid(seed=0):
    r = kl_identity_toy(100_000, seed)
    return [Check("KL invariance (3 SE)", int(r.z_score <= 3.0), 1, r.z_score),
            Check("entropy change (5%)", int(r.entropy_rel_err <= 0.05), 1, r.entropy_rel_err)]


def suite_metrics(seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(10, 1, 5))
    H = rng.normal(size=(10, 50, 1)) * base + rng.normal(size=(10, 1, 5))
    out = [_count("PR collinear = 1", np.abs(seq_participation_ratio(H) - 1.0), 1e-6)]
    H = rng.normal(size=(5, 2000, 5))
    out.append(_count("PR isotropic ~ d", np.abs(seq_participation_ratio(H) - 5) / 5, 0.05))
    return out


SUITES = {
    "flows": suite_flows,
    "autodiff": suite_autodiff,
    "elbo": suite_elbo,
    "limit": suite_limit,
    "klid": suite_klid,
    "metrics": suite_metrics,
}


def run(name, seed=0):
    names = list(SUITES) if name == "all" else [name]
    results = {}
    for n in names:
        results[n] = SUITES[n](seed)
    return results
