"""Run configuration: sectioned ``key = value`` text with typed fields.

Sections: ``[data]``, ``[stack]``, ``[layer.N]`` (N = 1, 2, ...),
``[optim]`` and ``[run]``. Unknown sections or keys are errors. Strings
may be written bare or JSON-quoted; the canonical form quotes them.
Lists are comma-separated; progressive blocks use ``;`` between blocks,
e.g. ``progressive_blocks = 1,2;3``.
"""

import dataclasses
import json
import re
from dataclasses import dataclass, field

from .conditioners import ConfigError
from .data import CorpusSpec
from .optim import OptimConfig
from .stack import FlowStackConfig, LayerSpec


class ConfigParseError(ConfigError):
    """Syntax or type error at a given 1-based line and column."""

    def __init__(self, msg, line, col):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line = line
        self.col = col


@dataclass
class StackSettings:
    latent_dim: int = 4
    patch_size: int = 1
    progressive_blocks: list = field(default_factory=list)
    progressive_steps: list = field(default_factory=list)


@dataclass
class RunSettings:
    seed: int = 0
    steps: int = 1000
    eval_every: int = 100
    eval_batches: int = 0
    checkpoint_dir: str = "checkpoints"
    metrics_csv: str = "metrics.csv"
    clamp_codebook: bool = True


@dataclass
class RunConfig:
    data: CorpusSpec = field(default_factory=CorpusSpec)
    stack: StackSettings = field(default_factory=StackSettings)
    layers: list = field(default_factory=list)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def stack_config(self):
        return FlowStackConfig(
            layers=[dataclasses.replace(s) for s in self.layers],
            latent_dim=self.stack.latent_dim,
            patch_size=self.stack.patch_size,
            max_tokens=self.data.chunk_len,
            progressive_blocks=[list(b) for b in self.stack.progressive_blocks],
            progressive_steps=list(self.stack.progressive_steps),
        )

    def validate(self, vocab_size=None):
        self.data.validate()
        self.stack_config().validate(vocab_size)


# ------------------------------------------------------------ value codecs

_LIST_FIELDS = {
    ("data", "markov_row"): float,
    ("stack", "progressive_steps"): int,
}


def _fmt_scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(v, ensure_ascii=False)


def _fmt(section, key, v):
    if (section, key) == ("stack", "progressive_blocks"):
        return ";".join(",".join(str(i) for i in b) for b in v)
    if isinstance(v, list):
        return ",".join(_fmt_scalar(x) for x in v)
    return _fmt_scalar(v)


def _parse_scalar(text, typ, line, col):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if text.startswith('"'):
            v = json.loads(text)
            if not isinstance(v, str):
                raise ValueError(text)
            return v
        return text
    except ValueError:
        raise ConfigParseError(f"expected {typ.__name__}, got {text!r}", line, col) from None


def _parse_value(section, key, text, typ, line, col):
    if (section, key) == ("stack", "progressive_blocks"):
        if not text:
            return []
        out = []
        for part in text.split(";"):
            out.append([_parse_scalar(x.strip(), int, line, col) for x in part.split(",")])
        return out
    if (section, key) in _LIST_FIELDS:
        if not text:
            return []
        et = _LIST_FIELDS[(section, key)]
        return [_parse_scalar(x.strip(), et, line, col) for x in text.split(",")]
    return _parse_scalar(text, typ, line, col)


def _field_types(cls):
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    defaults = cls()
    out = {}
    for name, t in hints.items():
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool, "list": list}[t]
        if t is list:
            t = type(getattr(defaults, name)[0]) if getattr(defaults, name) else str
        out[name] = t
    return out


_SECTIONS = {"data": CorpusSpec, "stack": StackSettings, "optim": OptimConfig, "run": RunSettings}
_LAYER_RE = re.compile(r"layer\.(\d+)$")


def _section_class(name):
    if name in _SECTIONS:
        return _SECTIONS[name]
    if _LAYER_RE.match(name):
        return LayerSpec
    return None


def parse_config(text):
    """Parse config text into a :class:`RunConfig`."""
    values = {}
    section = None
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigParseError("unterminated section header", lineno, col + len(stripped) - 1)
            section = stripped[1:-1].strip()
            if _section_class(section) is None:
                raise ConfigParseError(f"unknown section [{section}]", lineno, col + 1)
            if section in values:
                raise ConfigParseError(f"duplicate section [{section}]", lineno, col + 1)
            values[section] = {}
            continue
        if "=" not in stripped:
            raise ConfigParseError("expected 'key = value'", lineno, col)
        if section is None:
            raise ConfigParseError("key outside of a section", lineno, col)
        key, _, val = stripped.partition("=")
        key = key.strip()
        vcol = raw.index("=") + 2 + (len(val) - len(val.lstrip()))
        val = val.strip()
        cls = _section_class(section)
        types = _field_types(cls)
        if key not in types:
            raise ConfigParseError(f"unknown key {key!r} in [{section}]", lineno, col)
        if (section, key) in seen:
            raise ConfigParseError(f"duplicate key {key!r} in [{section}]", lineno, col)
        seen.add((section, key))
        values[section][key] = _parse_value(section, key, val, types[key], lineno, vcol)

    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in values:
            setattr(cfg, name, cls(**values[name]))
    layer_ids = sorted(int(_LAYER_RE.match(s).group(1)) for s in values if _LAYER_RE.match(s))
    if layer_ids != list(range(1, len(layer_ids) + 1)):
        raise ConfigError(f"layer sections must be numbered 1..L without gaps, got {layer_ids}")
    cfg.layers = [LayerSpec(**values[f"layer.{i}"]) for i in layer_ids]
    return cfg


def serialize_config(cfg):
    """Canonical text: every field written, sections in fixed order."""
    out = []

    def emit(name, obj):
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {_fmt(name.split('.')[0], f.name, getattr(obj, f.name))}")
        out.append("")

    emit("data", cfg.data)
    emit("stack", cfg.stack)
    for i, spec in enumerate(cfg.layers, 1):
        emit(f"layer.{i}", spec)
    emit("optim", cfg.optim)
    emit("run", cfg.run)
    return "\n".join(out)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# (lr, steps) runs for the toy model; each is warmup-then-constant continued
# from the previous optimizer state. Constant-lr Adam jitter alone leaves the
# learned transition probabilities about 0.01 off.
TOY_LR_STEPS = ((3e-3, 1500), (3e-4, 1500), (1e-4, 1000), (3e-5, 1500))


def toy_markov_config(**run_overrides):
    """Desk-scale tied Mix-d model on the 4-symbol Markov corpus.

    ``run.steps`` covers the first entry of :data:`TOY_LR_STEPS`.
    """
    cfg = RunConfig()
    cfg.data = CorpusSpec(source="synthetic:markov", vocab="abcd", chunk_len=64,
                          valid_fraction=0.1, seed=0, synthetic_tokens=1_000_000)
    cfg.stack = StackSettings(latent_dim=4, patch_size=1)
    cfg.layers = [
        LayerSpec(kind="mixd", direction="l2r", V=4, n_layers=1, d_model=32, n_heads=4,
                  tie_codebook=True),
        LayerSpec(kind="mixd", direction="r2l", V=4, n_layers=1, d_model=32, n_heads=4),
    ]
    lr, steps = TOY_LR_STEPS[0]
    cfg.optim = OptimConfig(lr=lr, warmup=100, batch_size=16)
    cfg.run = dataclasses.replace(RunSettings(steps=steps, eval_every=500), **run_overrides)
    return cfg
