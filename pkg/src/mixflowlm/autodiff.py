"""Reverse-mode automatic differentiation over dense float64 arrays.

A graph is recorded dynamically as operations run. Each operation creates
a ``Node`` holding its inputs and a vector-Jacobian rule; ``backward``
walks the nodes once in reverse topological order and frees them.

Broadcasting is deliberately narrow: elementwise binary ops require equal
shapes (or a Python scalar). Use :func:`add_bias`, :func:`affine` or
:func:`expand` where broadcasting is intended.
"""

import contextlib
import inspect
import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        text = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {text}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UsageError(RuntimeError):
    """The autodiff API was used incorrectly."""


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("inputs", "outputs_shape", "vjp", "name")

    def __init__(self, inputs, outputs_shape, vjp, name):
        self.inputs = inputs
        self.outputs_shape = outputs_shape
        self.vjp = vjp
        self.name = name


class Tensor:
    """A float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_index", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None
        self._index = 0
        self.name = name

    # basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return add(neg(self), o)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, vjp, name):
    """Wrap op output(s); attach a node when any input needs gradients."""
    multi = isinstance(data, tuple)
    outs = data if multi else (data,)
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    results = []
    node = Node(tuple(inputs), tuple(o.shape for o in outs), vjp, name) if track else None
    for i, o in enumerate(outs):
        t = Tensor.__new__(Tensor)
        t.data = np.asarray(o, dtype=np.float64)
        t.requires_grad = track
        t.grad = None
        t._node = node
        t._index = i
        t.name = None
        results.append(t)
    return tuple(results) if multi else results[0]


def _topo(root):
    order, seen = [], set()
    stack = [(root._node, False)]
    while stack:
        node, expanded = stack.pop()
        if node is None:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def backward(root):
    """Populate ``.grad`` of every reachable leaf with d(root)/d(leaf)."""
    if not isinstance(root, Tensor):
        raise UsageError("backward: root must be a Tensor")
    if root.data.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._node is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    order = _topo(root)
    cots = {id(root._node): [None] * len(root._node.outputs_shape)}
    cots[id(root._node)][root._index] = np.ones(root.shape)
    for node in reversed(order):
        gs = cots.pop(id(node), None)
        if gs is None:
            continue
        gs = [np.zeros(s) if g is None else g for g, s in zip(gs, node.outputs_shape)]
        in_grads = node.vjp(gs if len(gs) > 1 else gs[0])
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ShapeError(f"{node.name} (backward)", g.shape, t.shape)
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            else:
                slot = cots.setdefault(id(t._node), [None] * len(t._node.outputs_shape))
                prev = slot[t._index]
                slot[t._index] = g if prev is None else prev + g
        node.inputs = ()
        node.vjp = None


# ---------------------------------------------------------------- elementwise

def _binary_shapes(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        return _record(a.data + b, [a], lambda g: (g,), "add")
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _record(a.data + b.data, [a, b], lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        return _record(a.data - b, [a], lambda g: (g,), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _record(a.data - b.data, [a, b], lambda g: (g, -g), "sub")


def neg(a):
    return _record(-a.data, [a], lambda g: (-g,), "neg")


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a, c = as_tensor(a), float(b)
        return _record(a.data * c, [a], lambda g: (g * c,), "mul")
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, [a, b], lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a, c = as_tensor(a), float(b)
        return _record(a.data / c, [a], lambda g: (g / c,), "div")
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, [a, b], lambda g: (g / bd, -g * out / bd), "div")


def exp(a):
    out = np.exp(a.data)
    return _record(out, [a], lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _record(np.log(ad), [a], lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, [a], lambda g: (g * (1.0 - out * out),), "tanh")


def square(a):
    ad = a.data
    return _record(ad * ad, [a], lambda g: (2.0 * g * ad,), "square")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, [a], vjp, "gelu")


def softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(-np.abs(x)))
    return _record(out, [a], lambda g: (g * sig,), "softplus")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        try:
            mask = np.broadcast_to(mask, a.shape)
        except ValueError:
            raise ShapeError("masked_fill", a.shape, mask.shape) from None
    out = np.where(mask, value, a.data)
    return _record(out, [a], lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    """a [..., m, k] @ b [..., k, n] with identical batch dims, or b [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims differ")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, [a, b], vjp, "matmul")


def affine(x, w, b=None):
    """x [..., i] @ w [i, o] + b [o]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape, detail="bias must be [out]")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = [x, w] if b is None else [x, w, b]
    return _record(out, inputs, vjp, "affine")


def add_bias(x, b):
    """x [..., *b.shape] + b, broadcasting over leading axes."""
    if x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - b.ndim))
    return _record(x.data + b.data, [x, b], lambda g: (g, g.sum(axis=lead)), "add_bias")


def expand(a, shape):
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("expand", a.shape, shape) from None
    src = a.shape
    nlead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(nlead))) if nlead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, [a], vjp, "expand")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if np.ndim(axis) == 0 else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(op, (ndim,), detail=f"axis {ax} out of range")
        out.append(ax % ndim)
    return tuple(out)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim, "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, [a], vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim, "mean")
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    axes = _norm_axis(axis, a.ndim, "logsumexp")
    x = a.data
    m = np.max(x, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axes, keepdims=True)
    out_k = np.log(s) + m
    p = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * p,)

    return _record(out, [a], vjp, "logsumexp")


def softmax(a, axis=-1):
    axes = _norm_axis(axis, a.ndim, "softmax")
    x = a.data
    e = np.exp(x - x.max(axis=axes, keepdims=True))
    p = e / e.sum(axis=axes, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axes, keepdims=True)),)

    return _record(p, [a], vjp, "softmax")


def log_softmax(a, axis=-1):
    axes = _norm_axis(axis, a.ndim, "log_softmax")
    x = a.data
    m = x.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=axes, keepdims=True)) + m
    out = x - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axes, keepdims=True),)

    return _record(out, [a], vjp, "log_softmax")


def layer_norm(a, gain, bias, axis=-1, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    if _norm_axis(axis, a.ndim, "layer_norm") != (a.ndim - 1,):
        raise ShapeError("layer_norm", a.shape, detail="only the last axis is supported")
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(a.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, [a, gain, bias], vjp, "layer_norm")


# ------------------------------------------------------------------ indexing

def embedding_lookup(table, ids):
    """Rows of ``table`` [V, d] selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding_lookup: id out of range")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record(table.data[ids], [table], vjp, "embedding_lookup")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx):
    """Slicing/indexing; advanced indices accumulate in backward."""
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic(idx)

    def vjp(g):
        ga = np.zeros(shape)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _record(np.array(out, dtype=np.float64), [a], vjp, "slice")


slice_ = getitem


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _record(out, tensors, vjp, "stack")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _record(out, [a], lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(x % a.ndim for x in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = np.argsort([x % a.ndim for x in axes])
    return _record(a.data.transpose(axes), [a], lambda g: (g.transpose(inv),), "transpose")


def flip(a, axis):
    ax = axis % a.ndim
    return _record(np.flip(a.data, ax).copy(), [a], lambda g: (np.flip(g, ax).copy(),), "flip")


# -------------------------------------------------------------- custom ops

def register_custom(forward, backward, n_inputs=None, n_outputs=None, name="custom"):
    """Turn an analytic (forward, backward) pair into a graph operation.

    ``forward(*arrays)`` returns an array or a tuple of arrays.
    ``backward(inputs, outputs, cotangents)`` returns one cotangent per
    input (``None`` meaning zero). Input and output lists are arrays;
    cotangents of unused outputs arrive as zeros.
    """
    if n_inputs is None:
        params = [p for p in inspect.signature(forward).parameters.values()
                  if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
        n_inputs = len(params)
    else:
        try:
            params = [p for p in inspect.signature(forward).parameters.values()
                      if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
            has_var = any(p.kind == p.VAR_POSITIONAL
                          for p in inspect.signature(forward).parameters.values())
        except (TypeError, ValueError):
            params, has_var = None, True
        if params is not None and not has_var and len(params) != n_inputs:
            raise UsageError(f"{name}: forward takes {len(params)} inputs, declared {n_inputs}")
    try:
        bparams = inspect.signature(backward).parameters
        if len(bparams) != 3 and not any(p.kind == p.VAR_POSITIONAL for p in bparams.values()):
            raise UsageError(f"{name}: backward must accept (inputs, outputs, cotangents)")
    except (TypeError, ValueError):
        pass

    def op(*tensors):
        if len(tensors) != n_inputs:
            raise UsageError(f"{name}: expected {n_inputs} inputs, got {len(tensors)}")
        tensors = [as_tensor(t) for t in tensors]
        arrays = [t.data for t in tensors]
        res = forward(*arrays)
        multi = isinstance(res, tuple)
        outs = tuple(np.asarray(r, dtype=np.float64) for r in (res if multi else (res,)))
        if n_outputs is not None and len(outs) != n_outputs:
            raise UsageError(f"{name}: forward returned {len(outs)} outputs, declared {n_outputs}")

        def vjp(g):
            gs = list(g) if len(outs) > 1 else [g]
            grads = backward(arrays, outs, gs)
            grads = list(grads) if isinstance(grads, (list, tuple)) else [grads]
            if len(grads) != n_inputs:
                raise UsageError(f"{name}: backward returned {len(grads)} cotangents "
                                 f"for {n_inputs} inputs")
            out = []
            for arr, gr in zip(arrays, grads):
                if gr is None:
                    out.append(None)
                    continue
                gr = np.asarray(gr, dtype=np.float64)
                if gr.shape != arr.shape:
                    raise ShapeError(f"{name} (backward)", gr.shape, arr.shape)
                out.append(gr)
            return out

        return _record(outs if multi else outs[0], tensors, vjp, name)

    op.__name__ = name
    return op


# ------------------------------------------------------------- verification

def check_grad(fn, inputs, seed=0, h=1e-5, n_dirs=1):
    """Random-projection gradient check.

    ``fn`` maps Tensors to a scalar Tensor. For each random direction
    delta returns (analytic <grad, delta>, central difference) pairs.
    """
    rng = np.random.default_rng(seed)
    params = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in inputs]
    out = fn(*params)
    backward(out)
    grads = [p.grad.copy() for p in params]
    base = [p.data.copy() for p in params]
    pairs = []
    for _ in range(n_dirs):
        deltas = [rng.standard_normal(b.shape) for b in base]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, deltas))
        with no_grad():
            plus = fn(*[Tensor(b + h * d) for b, d in zip(base, deltas)]).item()
            minus = fn(*[Tensor(b - h * d) for b, d in zip(base, deltas)]).item()
        pairs.append((analytic, (plus - minus) / (2 * h)))
    return pairs


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
