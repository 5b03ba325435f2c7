"""Dense float64 tensors with a tape-based reverse-mode autodiff engine and Adam.

Operations record onto the active :class:`Tape` whenever one of their inputs
is tracked (a parameter with ``requires_grad`` or the output of an op already
on that tape). Outside a tape every op is a plain numpy computation, which is
what inference uses.

Broadcasting follows numpy's alignment on trailing axes: a lower-rank operand
is expanded along leading axes, and axes of size 1 (keepdims-style gates) are
expanded to match. Any other mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import json
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_state = threading.local()

PARAMS_FORMAT = "calonet-params"
PARAMS_VERSION = 1


class ShapeError(ValueError):
    pass


class Tape:
    """Records operations in execution order; only one tape is active per thread."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("another tape is already active")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        # float64 throughout; extended-precision input is kept as is so
        # reference evaluations can run with less roundoff
        dtype = np.longdouble if getattr(data, "dtype", None) == np.longdouble else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return self._index

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    out._index = None
    tape = active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every parameter reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; callers zero them
    between optimizer steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            return
        raise RuntimeError("backward: loss was not recorded on a tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records[: loss._index + 1]):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None:
                continue
            if t.requires_grad:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif t._tape is tape:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(np.asarray(x.data / math.sqrt(2.0), dtype=np.float64)))  # erf has no extended-precision loop
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    xd = x.data
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    src = x.shape

    def fn(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _make(np.array(out, dtype=x.data.dtype), (x,), fn)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    src = x.shape
    ax = axis % x.ndim

    def fn(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(np.take(x.data, idx, axis=ax), (x,), fn)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)
    src = x.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(src)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, ax), (x,), fn)


# ---------------------------------------------------------------------------
# normalisation-type ops


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive bias ``mask``.

    Entries of ``mask`` equal to ``-inf`` get weight exactly zero: they are
    excluded before exponentiation and from the row max.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        _broadcast_shape("softmax", x.shape, mask.shape)
        valid = np.broadcast_to(np.isfinite(mask), np.broadcast_shapes(x.shape, mask.shape))
        z = np.where(valid, z + np.where(np.isfinite(mask), mask, 0.0), -np.inf)
        m = z.max(axis=-1, keepdims=True)
        e = np.where(valid, np.exp(np.where(valid, z - m, 0.0)), 0.0)
    else:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    xs = x.shape

    def fn(g):
        return (_unbroadcast(y * (g - (g * y).sum(axis=-1, keepdims=True)), xs),)

    return _make(y, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: scale/shift shapes {gamma.shape}, {beta.shape} do not match {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), fn)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution over the last axis.

    x: (..., C_in, P); weight: (C_out, C_in, a) with odd a; bias: (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 2 or weight.shape[1] != x.shape[-2]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    a = weight.shape[2]
    if a % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {a}")
    pad = (a - 1) // 2
    P = x.shape[-1]
    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    cols = np.lib.stride_tricks.sliding_window_view(xp, a, axis=-1)  # (..., C_in, P, a)
    w = weight.data
    out = np.einsum("...cpk,ock->...op", cols, w)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {w.shape}")
        out = out + bias.data[:, None]
        inputs.append(bias)

    def fn(g):
        gw = np.einsum("ncpk,nop->ock", cols.reshape(-1, *cols.shape[-3:]), g.reshape(-1, *g.shape[-2:]))
        gcols = np.einsum("...op,ock->...cpk", g, w)
        gxp = np.zeros(xp.shape)
        for k in range(a):
            gxp[..., k : k + P] += gcols[..., k]
        gx = gxp[..., pad : pad + P]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)))
        return tuple(grads)

    return _make(out, inputs, fn)


# ---------------------------------------------------------------------------
# parameters and optimisation


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)))


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        missing = [k for k, p in self.params.items() if p.requires_grad and p.grad is None]
        if missing:
            raise RuntimeError(f"adam_step: no gradient for parameter(s) {missing}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: dict[str, Tensor], state: Adam) -> dict[str, Tensor]:
    state.step()
    return params


# ---------------------------------------------------------------------------
# serialisation


def params_to_list(params: dict[str, Tensor]) -> list[dict]:
    out = []
    for name, t in params.items():
        entry = {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
        if not t.requires_grad:
            entry["requires_grad"] = False
        out.append(entry)
    return out


def params_from_list(entries: list[dict]) -> dict[str, Tensor]:
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        values = np.asarray(e["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"parameter {e['name']!r}: {values.size} values for shape {shape}")
        t = parameter(values.reshape(shape))
        t.requires_grad = bool(e.get("requires_grad", True))
        out[e["name"]] = t
    return out


def dump_params(params: dict[str, Tensor]) -> str:
    return json.dumps({"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
                       "parameters": params_to_list(params)})


def load_params(text: str) -> dict[str, Tensor]:
    doc = json.loads(text)
    if doc.get("version") != PARAMS_VERSION:
        raise ValueError(f"parameter document version {doc.get('version')} != {PARAMS_VERSION}")
    return params_from_list(doc["parameters"])
