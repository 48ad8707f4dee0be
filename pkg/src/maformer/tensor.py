"""Dense tensors with an explicit reverse-mode tape.

A :class:`Tape` is created per forward pass. Parameters join it through
:meth:`Tape.watch`; every op whose inputs carry that tape records a node, and
:meth:`Tape.backward` replays the nodes in reverse. No module-level state is
involved, so two tapes never interfere.

Layout is row-major (C order) throughout.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPES = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """An immutable ndarray wrapper that can take part in a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, checked=True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if checked and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @classmethod
    def _wrap(cls, data, tape):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = tape is not None
        t.grad = None
        t.tape = tape
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        if self.tape is None:
            raise ValueError("tensor is not attached to a tape")
        self.tape.backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("inputs", "output", "vjp", "name")

    def __init__(self, inputs, output, vjp, name):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    ``macs`` accumulates multiply-accumulates of every recorded matrix
    product, which makes the tape double as an instrumentation counter.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.macs = 0

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Return a leaf tensor sharing ``value``'s data, tracked by this tape."""
        data = value.data if isinstance(value, Tensor) else np.ascontiguousarray(value)
        t = Tensor._wrap(data, self)
        return t

    def record(self, inputs, output, vjp, name=""):
        self.nodes.append(_Node(inputs, output, vjp, name))

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or t.tape is not self:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        # whatever remains belongs to leaves
        for node in self.nodes:
            for t in node.inputs:
                g = grads.pop(id(t), None)
                if g is not None:
                    t.grad = g if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# op plumbing
# --------------------------------------------------------------------------

def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), checked=False)


def _tape_of(tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _make(data, inputs, vjp: Callable, name: str, macs: int = 0) -> Tensor:
    tape = _tape_of(inputs)
    out = Tensor._wrap(data, tape)
    if tape is not None:
        tape.record(inputs, out, vjp, name)
        tape.macs += macs
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    return as_tensor(a), as_tensor(b)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        c = b
        return _make(a.data * np.asarray(c, a.dtype), (a,), lambda g: (g * c,), "scale")
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.tape is not None else None
        gb = _unbroadcast(g * ad, bd.shape) if b.tape is not None else None
        return ga, gb

    return _make(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make(ad / bd, (a, b), vjp, "div")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    x2 = x.data.reshape(-1, x.shape[-1] if x.ndim else 1)
    y = kernels.gelu_fwd(x2).reshape(x.shape)

    def vjp(g):
        return (kernels.gelu_bwd(x2, np.ascontiguousarray(g).reshape(x2.shape)).reshape(x.shape),)

    return _make(y, (x,), vjp, "gelu")


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    macs = int(np.prod(batch, dtype=np.int64)) * m * k * n

    def vjp(g):
        ga = gb = None
        if a.tape is not None:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.tape is not None:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul", macs)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {as_tensor(bias).shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1]))
    y = matmul(x2, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


# --------------------------------------------------------------------------
# normalisation / attention pieces
# --------------------------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    """Numerically stable softmax (max subtracted per row)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    mshape = moved.shape
    x2 = np.ascontiguousarray(moved).reshape(-1, mshape[-1])
    y2 = kernels.softmax_fwd(x2)
    y = np.ascontiguousarray(np.moveaxis(y2.reshape(mshape), -1, axis))

    def vjp(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(x2.shape)
        dx = kernels.softmax_bwd(y2, g2).reshape(mshape)
        return (np.ascontiguousarray(np.moveaxis(dx, -1, axis)),)

    return _make(y, (x,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: channels {c} vs gamma {gamma.shape} / beta {beta.shape}")
    x2 = x.data.reshape(-1, c)
    y2, mu, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def vjp(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(x2.shape),
                                            x2, gamma.data, mu, rstd)
        return dx.reshape(x.shape), dg, db

    return _make(y2.reshape(x.shape), (x, gamma, beta), vjp, "layer_norm")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, K]`` against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    b = z.shape[0]
    loss = np.asarray((lse - z[np.arange(b), labels]).mean(), dtype=z.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return _make(loss, (logits,), vjp, "cross_entropy")


# --------------------------------------------------------------------------
# layout
# --------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _make(y, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _make(y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    return _make(y, tuple(ts), vjp, "concat")


def slice_(x, idx) -> Tensor:
    """Basic (slice/int) indexing with a scatter-back gradient."""
    x = as_tensor(x)
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not isinstance(i, (slice, int, type(Ellipsis))):
            raise TypeError("slice_ supports ints, slices and Ellipsis only")
    y = np.ascontiguousarray(x.data[idx])

    def vjp(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _make(y, (x,), vjp, "slice")


def pad(x, widths) -> Tensor:
    """Zero-pad; ``widths`` is one ``(before, after)`` pair per axis."""
    x = as_tensor(x)
    widths = tuple((int(a), int(b)) for a, b in widths)
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    y = np.pad(x.data, widths)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _make(y, (x,), lambda g: (np.ascontiguousarray(g[crop]),), "pad")


def roll(x, shifts, axes) -> Tensor:
    x = as_tensor(x)
    shifts = tuple(shifts)
    axes = tuple(axes)
    if not any(shifts):
        return x
    y = np.roll(x.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return _make(y, (x,), lambda g: (np.roll(g, back, axes),), "roll")


def take(x, index, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array; repeats accumulate in backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    y = np.ascontiguousarray(np.take(x.data, index, axis=axis))

    nidx = index.ndim

    def vjp(g):
        moved = np.moveaxis(g, list(range(axis, axis + nidx)), list(range(nidx)))
        src = np.ascontiguousarray(moved).reshape(index.size, -1)
        rest = moved.shape[nidx:]
        out = np.zeros((x.shape[axis],) + rest, dtype=g.dtype)
        kernels.scatter_add_rows(out.reshape(x.shape[axis], -1), index.reshape(-1), src)
        return (np.ascontiguousarray(np.moveaxis(out, 0, axis)),)

    return _make(y, (x,), vjp, "take")


def interp_linear_tokens(x, target_len: int) -> Tensor:
    """Resample ``x[B, L, C]`` to ``target_len`` tokens by linear interpolation.

    Align-corners semantics: the first and last source tokens land exactly on
    the first and last output tokens.
    """
    x = as_tensor(x)
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"interp_linear_tokens expects (B, L, C), got {x.shape}")
    L = x.shape[1]
    if target_len == L:
        return x
    if target_len == 1 or L == 1:
        pos = np.zeros(target_len)
    else:
        pos = np.arange(target_len) * ((L - 1) / (target_len - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), L - 1)
    hi = np.minimum(lo + 1, L - 1)
    w = (pos - lo).astype(x.dtype)[None, :, None]
    x_lo = take(x, lo, axis=1)
    x_hi = take(x, hi, axis=1)
    return add(mul(x_lo, 1.0 - w), mul(x_hi, w))
