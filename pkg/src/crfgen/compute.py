"""Dense float64 numerics with a reverse-mode tape.

Arrays are plain ``numpy.ndarray`` objects in double precision.  A
:class:`Tensor` wraps one array and, when it was produced from operands that
live on a :class:`Tape`, records the local vector-Jacobian product needed to
push gradients back to its operands.  Primitives are coarse (matmul,
elementwise maps, reductions, gathers), so a tape over a length-``T`` chain
has ``O(T)`` nodes.

Tensors that are not attached to any tape behave as constants; every model
function in the package therefore runs unchanged with or without gradient
tracking.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
    "backward",
    "logsumexp",
    "AdamState",
    "adam_step",
    "grad_check",
    "gradient_errors",
    "save_checkpoint",
    "load_checkpoint",
    "substream",
]


class NumericError(FloatingPointError):
    """A computation produced a non-finite value."""


def logsumexp(v, axis=None, keepdims=False):
    """Stable ``log(sum(exp(v)))`` along ``axis`` (all entries when None)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if np.ndim(out) else float(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """Ordered record of primitive applications for one backward sweep.

    Not thread-safe: build and differentiate a tape on a single thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def param(self, name: str, value) -> "Tensor":
        if name in self.leaves:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64).view()
        arr.flags.writeable = False
        leaf = Tensor(arr, tape=self, name=name)
        self.leaves[name] = leaf
        return leaf

    def params(self, values: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {k: self.param(k, v) for k, v in values.items()}


class Tensor:
    __slots__ = ("value", "tape", "parents", "vjp", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, tracked={self.tape is not None})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)


def const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value)


def _make(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, tuple(parents), vjp)
    tape.nodes.append(out)
    return out


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = const(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = const(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Tensor:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = const(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = const(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = const(a)
    av = a.value
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = const(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of operands with ``ndim >= 2`` (leading dims broadcast)."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = const(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = const(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(ts: Sequence, axis: int = -1) -> Tensor:
    ts = [const(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [const(t) for t in ts]
    n = len(ts)
    return _make(np.stack([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def getitem(a, key) -> Tensor:
    a = const(a)
    shape = a.shape
    basic = _is_basic(key)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _make(a.value[key], (a,), vjp)


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather entries ``idx`` (1-D integer array) along ``axis``."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        z = np.zeros(np.moveaxis(np.empty(shape, dtype=np.int8), axis, 0).shape)
        np.add.at(z, idx, np.moveaxis(g, axis, 0))
        return (np.moveaxis(z, 0, axis),)

    return _make(np.take(a.value, idx, axis=axis), (a,), vjp)


def pick(a, idx) -> Tensor:
    """Row-wise selection: ``out[b] = a[b, idx[b]]`` for a 2-D ``a``."""
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(a, (np.arange(len(idx)), idx))


# -- reductions --------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = const(a)
    shape = a.shape
    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = const(a)
    n = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def lse(a, axis=None, keepdims=False) -> Tensor:
    """Tape-aware log-sum-exp; the gradient is the softmax along ``axis``."""
    a = const(a)
    av = a.value
    out_k = logsumexp(av, axis=axis, keepdims=True)
    out_k = np.asarray(out_k)
    soft = np.exp(av - out_k)
    out = out_k if keepdims else (
        np.squeeze(out_k, axis=axis) if axis is not None else out_k.reshape(()))
    return _make(out, (a,),
                 lambda g: (_expand(g, av.shape, axis, keepdims) * soft,))


# -- backward sweep ----------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``root`` for every parameter leaf of ``tape``.

    Leaves that do not influence ``root`` get zero arrays.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if gp is None or parent.tape is not tape:
                continue
            k = id(parent)
            grads[k] = grads[k] + gp if k in grads else gp
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)
    return out


# -- optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and a new state."""
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


# -- gradient checking -------------------------------------------------------

FD_ULPS = 8  # rounding slack of one loss evaluation, in units in the last place


def gradient_errors(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                    params: Mapping[str, np.ndarray], eps: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0,
                    ulps: float = FD_ULPS) -> dict[str, float]:
    """Per-parameter maximum relative error of tape gradients vs central differences.

    ``loss_fn`` must be deterministic in ``params``; freeze all noise first.
    With ``max_coords`` set, a seeded random subset of coordinates is probed
    in each parameter.  A discrepancy smaller than the rounding resolution of
    the central difference (a few ulps of the loss divided by ``2 eps``) is
    indistinguishable from agreement and scores zero; this matters only for
    coordinates whose true gradient is zero or nearly so.  ``ulps=0`` gives the
    plain relative error.
    """
    tape = Tape()
    root = loss_fn(tape.params(params))
    analytic = backward(tape, root)
    consts = {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            vals = []
            for step in (eps, -eps):
                q = p.copy()
                q.flat[i] += step
                vals.append(float(loss_fn({**consts, name: Tensor(q)}).value))
            num = (vals[0] - vals[1]) / (2.0 * eps)
            ana = float(analytic[name].flat[i])
            resolution = ulps * np.finfo(np.float64).eps * max(map(abs, vals)) / (2.0 * eps)
            if abs(ana - num) > resolution:
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        errors[name] = worst
    return errors


def grad_check(loss_fn, params, eps: float = 1e-5, **kwargs) -> float:
    """Maximum relative gradient error over all probed coordinates."""
    errs = gradient_errors(loss_fn, params, eps, **kwargs)
    return max(errs.values(), default=0.0)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CRFGEN-CKPT v1\n"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors; the file is replaced atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f8", order="C")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a CRFGEN-CKPT v1 file")
    pos = len(CKPT_MAGIC)
    out = {}

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    while pos < len(data):
        (n,) = read("<Q")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = read("<Q")
        shape = read(f"<{rank}Q")
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def text_to_tensor(text: str) -> np.ndarray:
    """Store UTF-8 bytes as float64 values so text can ride in a checkpoint."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


# -- randomness --------------------------------------------------------------

def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose derived from one global seed.

    Keys are hashed names, so adding a new consumer never shifts the draws
    of an existing one.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))
