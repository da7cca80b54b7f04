"""Command-line interface.

Stdout carries machine-readable output (CSV or ``key=value`` lines);
progress logging goes to stderr.

Exit codes: 0 success, 1 failed verify suite, 2 bad config / missing or
unreadable checkpoint, 3 numeric failure during training.
"""

import argparse
import contextlib
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

log = logging.getLogger("mixflowlm")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _thread_limit(n):
    if n is None:
        env = os.environ.get("TARFLOW_THREADS")
        n = int(env) if env else None
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_config(path):
    from .bridge import DataError
    from .config import ConfigError, load_config

    try:
        return load_config(path)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_CONFIG) from e
    except (ConfigError, DataError) as e:
        raise CliError(f"{path}: {e}", EXIT_CONFIG) from e


def _load_ckpt(path):
    from .bridge import DataError
    from .checkpoint import FormatError, SchemaError, load
    from .config import ConfigError

    if not path or not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}", EXIT_CONFIG)
    try:
        return load(path)
    except (FormatError, SchemaError, ConfigError, DataError) as e:
        raise CliError(f"{path}: {e}", EXIT_CONFIG) from e


def _kv(**items):
    print(" ".join(f"{k}={v}" for k, v in items.items()))


# ---------------------------------------------------------------- commands

def cmd_train(args):
    from .bridge import DataError
    from .checkpoint import save
    from .config import ConfigError
    from .numerics import NumericError
    from .trainer import MetricsLog, build_model, build_optimizer, evaluate, train

    cfg = _load_config(args.config)
    if args.resume:
        _, model, opt, corpus = _load_ckpt(args.resume)
        # parameters, moments and step come from the checkpoint; optimizer
        # hyperparameters from the config, so a run can continue at a new lr
        opt.cfg = cfg.optim
    else:
        try:
            model, corpus = build_model(cfg)
        except (ConfigError, DataError) as e:
            raise CliError(f"{args.config}: {e}", EXIT_CONFIG) from e
        opt = build_optimizer(cfg, model)
    steps = cfg.run.steps if args.steps is None else args.steps
    os.makedirs(cfg.run.checkpoint_dir, exist_ok=True)
    mlog = MetricsLog(cfg.run.metrics_csv)

    def checkpoint():
        path = os.path.join(cfg.run.checkpoint_dir, f"step{opt.t:08d}.tflm")
        save(path, cfg, model, opt)
        save(os.path.join(cfg.run.checkpoint_dir, "latest.tflm"), cfg, model, opt)
        return path

    def on_eval(step):
        bits = evaluate(corpus.valid, model, cfg.run.seed, max_batches=cfg.run.eval_batches)
        log.info("step %d valid nelbo %.4f bits/token", step, bits)
        _kv(step=step, valid_nelbo_bits=repr(bits))
        checkpoint()

    log.info("training %d parameters for %d steps from step %d", model.n_params(), steps, opt.t)
    try:
        train(cfg, model, opt, corpus, steps=steps, log=mlog, on_eval=on_eval)
    except NumericError as e:
        raise CliError(f"training failed at step {opt.t}: {e}", EXIT_NUMERIC) from e
    path = checkpoint()
    _kv(step=opt.t, checkpoint=path)
    return EXIT_OK


def cmd_eval(args):
    from .trainer import evaluate

    cfg, model, _, corpus = _load_ckpt(args.ckpt)
    if args.config:
        cfg = _load_config(args.config)
    chunks = corpus.valid if args.split == "valid" else corpus.train
    if len(chunks) == 0:
        raise CliError(f"split {args.split} is empty", EXIT_CONFIG)
    bits = evaluate(chunks, model, args.seed if args.seed is not None else cfg.run.seed)
    _kv(split=args.split, nelbo_bits=repr(bits), tokens=chunks.size)
    return EXIT_OK


def cmd_sample(args):
    from .analysis import generate

    cfg, model, _, corpus = _load_ckpt(args.ckpt)
    T = args.length or cfg.data.chunk_len
    gen = generate(model, args.n, T, seed=args.seed, temperature=args.temperature,
                   intermediates=args.show_intermediates, sample_decode=args.sample_decode)
    for i in range(args.n):
        if args.show_intermediates:
            for l, dec in enumerate(gen.intermediates):
                _kv(sample=i, layer=l, text=repr(corpus.render(dec[i])))
        else:
            _kv(sample=i, text=repr(corpus.render(gen.tokens[i])))
    return EXIT_OK


def cmd_verify(args):
    from .verify import run

    results = run(args.suite, args.seed)
    code = EXIT_OK
    for suite, checks in results.items():
        for c in checks:
            _kv(suite=suite, check=repr(c.name), passed=c.passed, total=c.total,
                worst=f"{c.worst:.3e}", status="PASS" if c.ok else "FAIL")
            if not c.ok:
                code = EXIT_VERIFY
    return code


def cmd_metrics(args):
    from .analysis import latent_metrics
    from .data import ingest

    cfg, model, _, corpus = _load_ckpt(args.ckpt)
    if args.corpus and args.corpus not in ("train", "valid"):
        vocab = "".join(s if isinstance(s, str) else chr(s[0]) for s in corpus.vocab)
        spec = dataclasses.replace(cfg.data, source=args.corpus, vocab=vocab, valid_fraction=0.0)
        chunks = ingest(spec).train
    else:
        chunks = corpus.valid if args.corpus != "train" else corpus.train
    chunks = chunks[:args.n]
    rng = np.random.default_rng(args.seed)
    noise = rng.standard_normal(model.noise_shape(chunks))
    tr = model.forward_trace(chunks, noise)
    report = latent_metrics(tr.h_seq, token_dim=model.d)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("layer", "metric", "mean", "std"))
    for row in report.rows():
        w.writerow((row[0], row[1], repr(row[2]), repr(row[3])))
    return EXIT_OK


def cmd_flops(args):
    from .analysis import GPT2_PRESETS, PRESET_S, PRESET_V, flops_table

    patch_sizes = [int(p) for p in args.patch_sizes.split(",")]
    if args.L is not None:
        if args.d is None:
            raise CliError("--L needs --d", EXIT_CONFIG)
        presets = {"custom": (args.L, args.d)}
    elif args.preset == "all":
        presets = GPT2_PRESETS
    elif args.preset in GPT2_PRESETS:
        presets = {args.preset: GPT2_PRESETS[args.preset]}
    else:
        raise CliError(f"unknown preset {args.preset!r}; choose from all, {', '.join(GPT2_PRESETS)}",
                       EXIT_CONFIG)
    S = args.S or PRESET_S
    V = args.V or PRESET_V
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("config", "patch_size", "regular_flops", "flow_flops", "ratio"))
    for name, P, reg, fl, ratio in flops_table(presets, patch_sizes, S, V):
        w.writerow((name, P, reg, fl, f"{ratio:.6f}"))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="mixflowlm", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap native worker threads (env TARFLOW_THREADS as fallback)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="NELBO in bits/token on a split")
    e.add_argument("config", nargs="?")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "valid"), default="valid")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="generate text by inverting the flow")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--length", type=int)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--show-intermediates", action="store_true")
    s.add_argument("--sample-decode", action="store_true",
                   help="sample tokens from the decoder posterior instead of argmax")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("--suite", default="all",
                   choices=("all", "flows", "autodiff", "elbo", "limit", "klid", "metrics"))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("metrics", help="latent evolution metrics as CSV")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--corpus", default="valid", help="train, valid, or a text file path")
    m.add_argument("--n", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    f = sub.add_parser("flops", help="FLOPs of regular vs flow transformers")
    f.add_argument("--preset", default="all")
    f.add_argument("--L", type=int)
    f.add_argument("--d", type=int)
    f.add_argument("--S", type=int)
    f.add_argument("--V", type=int)
    f.add_argument("--patch-sizes", default="1,2,4")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
