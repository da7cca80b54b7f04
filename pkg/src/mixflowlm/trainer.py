"""ELBO training loop, evaluation and metrics logging."""

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .conditioners import LOG_STD_HI, LOG_STD_LO
from .data import batch_stream, ingest
from .model import LatentFlowLM
from .optim import Adam
from .stack import progressive_schedule

METRIC_FIELDS = ("step", "nelbo_bits", "grad_norm", "lr", "active_block")


def build_model(cfg, corpus=None):
    """Instantiate corpus and model from a RunConfig (seeded by run.seed)."""
    corpus = ingest(cfg.data) if corpus is None else corpus
    cfg.validate(corpus.V)
    rng = np.random.default_rng(cfg.run.seed)
    return LatentFlowLM(corpus.V, cfg.stack_config(), rng), corpus


def build_optimizer(cfg, model):
    return Adam(model.parameters(), cfg.optim)


def noise_for(model, tokens, seed, step, stream=0):
    """Encoder noise for one batch, a pure function of (seed, stream, step)."""
    rng = np.random.default_rng([seed, stream, step])
    return rng.standard_normal(model.noise_shape(tokens))


def active_parameters(model, step):
    """Names of parameters updated at ``step`` under the progressive schedule."""
    layers, block = progressive_schedule(model.stack_config, step)
    names = set()
    for i in layers:
        names.update(model.stack.layer_parameters(i))
    if block == 0:
        names.update(model.codebook.parameters())
    return names, block


@dataclass
class StepMetrics:
    step: int
    nelbo_bits: float
    grad_norm: float
    lr: float
    active_block: int

    def row(self):
        return [self.step, repr(self.nelbo_bits), repr(self.grad_norm), repr(self.lr), self.active_block]


def train_step(tokens, model, optimizer, seed=0, clamp_codebook=True):
    """One stochastic ELBO step; returns :class:`StepMetrics`."""
    step = optimizer.t
    noise = noise_for(model, tokens, seed, step)
    active, block = active_parameters(model, step)
    optimizer.zero_grad()
    loss, info = model.objective(tokens, noise)
    loss.backward()
    lr = optimizer.lr()
    norm = optimizer.step(active)
    if clamp_codebook and "codebook.log_stds" in active:
        np.clip(model.codebook.log_stds.data, LOG_STD_LO, LOG_STD_HI,
                out=model.codebook.log_stds.data)
    return StepMetrics(step, info.nelbo_bits, norm, lr, block + 1)


def evaluate(chunks, model, seed=0, batch_size=64, max_batches=0):
    """Mean NELBO in bits per token over ``chunks`` with seeded noise."""
    total, count = 0.0, 0
    n = len(chunks)
    for bi, i in enumerate(range(0, n, batch_size)):
        if max_batches and bi >= max_batches:
            break
        tokens = chunks[i:i + batch_size]
        noise = noise_for(model, tokens, seed, bi, stream=1)
        bits = model.nelbo_bits(tokens, noise)
        total += bits * tokens.size
        count += tokens.size
    return total / count


class MetricsLog:
    """Append-only CSV with a header written once."""

    def __init__(self, path):
        self.path = path
        if path and (not os.path.exists(path) or os.path.getsize(path) == 0):
            d = os.path.dirname(path)
            if d:
                os.makedirs(d, exist_ok=True)
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_FIELDS)

    def append(self, m):
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(m.row())


def train(cfg, model, optimizer, corpus, steps=None, log=None, on_eval=None):
    """Run ``steps`` optimizer steps continuing from ``optimizer.t``.

    The batch stream is a pure function of the seed, so a resumed run
    consumes the same batches as an uninterrupted one.
    """
    steps = cfg.run.steps if steps is None else steps
    stream = batch_stream(corpus.train, cfg.optim.batch_size, cfg.run.seed)
    for _ in range(optimizer.t):
        next(stream)
    history = []
    for _ in range(steps):
        m = train_step(next(stream), model, optimizer, cfg.run.seed, cfg.run.clamp_codebook)
        history.append(m)
        if log is not None:
            log.append(m)
        if on_eval is not None and cfg.run.eval_every and optimizer.t % cfg.run.eval_every == 0:
            on_eval(optimizer.t)
    return history


def train_lr_steps(cfg, model, optimizer, corpus, lr_steps, log=None, on_eval=None):
    """Consecutive :func:`train` runs, run i at constant lr ``lr_steps[i][0]``.

    Same result as resuming from checkpoints with the lr lowered in the
    config each time.
    """
    history = []
    for lr, steps in lr_steps:
        optimizer.cfg = dataclasses.replace(optimizer.cfg, lr=lr)
        history += train(cfg, model, optimizer, corpus, steps=steps, log=log, on_eval=on_eval)
    return history


__all__ = ["build_model", "build_optimizer", "train_step", "evaluate", "train", "train_lr_steps",
           "MetricsLog", "noise_for", "active_parameters", "StepMetrics"]
