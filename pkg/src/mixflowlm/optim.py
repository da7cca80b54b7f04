"""Adam with linear warmup and global-norm gradient clipping."""

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    warmup: int = 100
    batch_size: int = 16


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    """Scale gradients so their joint norm is at most ``max_norm``.

    Returns (clipped list, norm before clipping).
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        return [g * s for g in grads], norm
    return list(grads), norm


class Adam:
    """Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self.params = params
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def lr(self, step=None):
        step = self.t if step is None else step
        if self.cfg.warmup <= 0:
            return self.cfg.lr
        return self.cfg.lr * min(1.0, (step + 1) / self.cfg.warmup)

    def step(self, active=None):
        """Apply one update to the parameters named in ``active`` (default all).

        Gradients are read from ``Tensor.grad`` (None counts as zero) and
        clipped jointly over the active set. Returns the pre-clip norm.
        """
        names = [k for k in self.params if active is None or k in active]
        grads = [self.params[k].grad if self.params[k].grad is not None
                 else np.zeros_like(self.params[k].data) for k in names]
        grads, norm = clip_by_global_norm(grads, self.cfg.clip)
        lr = self.lr()
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in zip(names, grads):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p = self.params[k]
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)
        return norm

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """Named arrays for serialization."""
        out = {"step": np.array(float(self.t))}
        for k in self.params:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state(self, state):
        self.t = int(state["step"])
        for k in self.params:
            self.m[k] = np.array(state["m." + k], dtype=np.float64)
            self.v[k] = np.array(state["v." + k], dtype=np.float64)
