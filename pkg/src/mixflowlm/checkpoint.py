"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TFLM"  u32 version
    u32 n    config text (UTF-8, canonical form), n bytes
    u32 count
    count x { u32 len, name (UTF-8) ; u32 ndim ; ndim x u64 shape ; f64 data }

Model parameters are stored under their own names, optimizer state
under ``optim.``-prefixed names.
"""

import struct

import numpy as np

from .config import parse_config, serialize_config

MAGIC = b"TFLM"
VERSION = 1


class FormatError(ValueError):
    """File is not a readable checkpoint of this version."""


class SchemaError(ValueError):
    """Checkpoint lacks a tensor the configuration requires."""


def _pack_blob(name, arr):
    arr = np.asarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(config_text, tensors):
    """Serialize config text and a name -> array mapping (order kept)."""
    ct = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(ct)), ct,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        parts.append(_pack_blob(name, arr))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf):
    """Inverse of :func:`dumps`: returns (config text, dict of arrays)."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes; not a checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        text = r.take(r.u32("config length"), "config").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("config text is not UTF-8") from e
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="strict")
        ndim = r.u32("ndim")
        if ndim > 32:
            raise FormatError(f"implausible rank {ndim} for {name}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return text, tensors


def save(path, run_config, model, optimizer=None):
    tensors = {k: p.data for k, p in model.parameters().items()}
    if optimizer is not None:
        for k, v in optimizer.state().items():
            tensors["optim." + k] = v
    with open(path, "wb") as f:
        f.write(dumps(serialize_config(run_config), tensors))


def load(path):
    """Rebuild (run_config, model, optimizer) from a checkpoint file."""
    from .trainer import build_model, build_optimizer

    with open(path, "rb") as f:
        text, tensors = loads(f.read())
    cfg = parse_config(text)
    model, corpus = build_model(cfg)
    for name, p in model.parameters().items():
        if name not in tensors:
            raise SchemaError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != p.shape:
            raise SchemaError(f"parameter {name}: shape {tensors[name].shape} != {p.shape}")
        p.data[...] = tensors[name]
    opt = build_optimizer(cfg, model)
    ostate = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    if ostate:
        missing = [k for k in opt.state() if k not in ostate]
        if missing:
            raise SchemaError(f"checkpoint lacks optimizer state {missing[0]}")
        opt.load_state(ostate)
    return cfg, model, opt, corpus
