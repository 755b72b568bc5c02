"""Tape-based reverse-mode differentiation over a single flat parameter vector.

Every trainable tensor of a model is a reshaped slice of one float64 vector,
so masks and per-coordinate scores live in one global coordinate space.
A :class:`Tape` is built from the *effective* parameter values (typically
``theta * mask``); ``tape.backward(loss)`` returns the gradient with respect
to those values as a flat array of the same length.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError, DomainError, StateError

SEGMENT_KINDS = ("linear-weight", "bias", "embedding", "norm-scale")


@dataclass(frozen=True)
class LayerSegment:
    """A named, contiguous slice of the flat parameter vector."""

    name: str
    offset: int
    size: int
    fan_in: int
    fan_out: int
    kind: str
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ConfigurationError(f"unknown segment kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ConfigurationError(f"segment {self.name}: fan_in/fan_out must be >= 1")
        if int(np.prod(self.shape)) != self.size:
            raise ConfigurationError(f"segment {self.name}: shape {self.shape} != size {self.size}")
        if self.kind == "linear-weight" and self.size != self.fan_in * self.fan_out:
            raise ConfigurationError(f"segment {self.name}: size must equal fan_in * fan_out")

    @property
    def stop(self) -> int:
        return self.offset + self.size

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


class LayoutBuilder:
    """Accumulates segments in order; offsets are assigned contiguously."""

    def __init__(self):
        self._segments: list[LayerSegment] = []
        self._offset = 0

    def _add(self, name, shape, kind, fan_in, fan_out):
        if any(s.name == name for s in self._segments):
            raise ConfigurationError(f"duplicate segment name {name!r}")
        size = int(np.prod(shape))
        seg = LayerSegment(name, self._offset, size, fan_in, fan_out, kind, tuple(shape))
        self._segments.append(seg)
        self._offset += size
        return seg

    def linear(self, name: str, fan_in: int, fan_out: int) -> LayerSegment:
        return self._add(name, (fan_in, fan_out), "linear-weight", fan_in, fan_out)

    def bias(self, name: str, n: int) -> LayerSegment:
        return self._add(name, (n,), "bias", 1, n)

    def embedding(self, name: str, rows: int, dim: int) -> LayerSegment:
        return self._add(name, (rows, dim), "embedding", rows, dim)

    def norm_scale(self, name: str, n: int) -> LayerSegment:
        return self._add(name, (n,), "norm-scale", 1, n)

    def build(self) -> tuple[LayerSegment, ...]:
        return tuple(self._segments)


class ParamVector:
    """Flat float64 parameter vector with per-layer segment metadata.

    The length is fixed at construction; contents may be updated in place.
    """

    __slots__ = ("_values", "layout", "_by_name")

    def __init__(self, layout: Sequence[LayerSegment], values=None):
        layout = tuple(layout)
        offset = 0
        for seg in layout:
            if seg.offset != offset:
                raise ConfigurationError(
                    f"segment {seg.name} starts at {seg.offset}, expected {offset}")
            offset = seg.stop
        if values is None:
            values = np.zeros(offset)
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != offset:
            raise ConfigurationError(
                f"values length {values.shape} does not match layout size {offset}")
        self._values = values
        self.layout = layout
        self._by_name = {s.name: s for s in layout}

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self._values.shape[0]

    def segment(self, name: str) -> LayerSegment:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigurationError(f"no segment named {name!r}") from None

    def view(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self._values[seg.slice].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self._values.copy())

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.layout, values)

    def __repr__(self):
        return f"ParamVector(size={len(self)}, segments={len(self.layout)})"


# ---------------------------------------------------------------------------
# Tape and nodes


class Node:
    __slots__ = ("tape", "value", "index", "requires_grad")

    def __init__(self, tape, value, index, requires_grad):
        self.tape = tape
        self.value = value
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations for a single forward pass and replays them backward.

    ``theta`` holds the effective parameter values the forward pass reads.
    With ``train=True`` dropout is active and seeded from ``seed``.
    """

    def __init__(self, theta, layout: Sequence[LayerSegment], *, train: bool = False, seed=None):
        self.theta = np.asarray(theta, dtype=np.float64)
        self._layout = {s.name: s for s in layout}
        if self.theta.ndim != 1 or self.theta.shape[0] != sum(s.size for s in layout):
            raise ConfigurationError("theta length does not match layout")
        self.train = train
        self.rng = np.random.default_rng(seed) if train else None
        self._records: list[tuple[int, tuple[Node, ...], Callable]] = []
        self._params: dict[int, LayerSegment] = {}
        self._param_nodes: dict[str, Node] = {}
        self._count = 0
        self._consumed = False

    @classmethod
    def for_params(cls, params: ParamVector, mask=None, **kwargs) -> "Tape":
        theta = params.values if mask is None else params.values * mask
        return cls(theta, params.layout, **kwargs)

    def _new(self, value, requires_grad) -> Node:
        node = Node(self, value, self._count, requires_grad)
        self._count += 1
        return node

    def param(self, name: str) -> Node:
        if name in self._param_nodes:
            return self._param_nodes[name]
        try:
            seg = self._layout[name]
        except KeyError:
            raise ConfigurationError(f"no segment named {name!r}") from None
        node = self._new(self.theta[seg.slice].reshape(seg.shape), True)
        self._params[node.index] = seg
        self._param_nodes[name] = node
        return node

    def constant(self, value) -> Node:
        return self._new(np.asarray(value, dtype=np.float64), False)

    def record(self, value, parents: Sequence[Node], vjp: Callable) -> Node:
        """Create an output node; ``vjp(g)`` returns one gradient per parent."""
        parents = tuple(parents)
        tracked = any(p.requires_grad for p in parents)
        node = self._new(value, tracked)
        if tracked:
            self._records.append((node.index, parents, vjp))
        return node

    def backward(self, loss: Node) -> np.ndarray:
        """Gradient of the scalar ``loss`` with respect to ``theta``."""
        if self._consumed:
            raise StateError("backward already ran on this tape")
        if not isinstance(loss, Node) or loss.tape is not self:
            raise StateError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ConfigurationError(f"loss must be scalar, got shape {loss.value.shape}")
        self._consumed = True
        flat = np.zeros_like(self.theta)
        if not loss.requires_grad:
            return flat
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for out, parents, vjp in reversed(self._records):
            g = grads.pop(out, None)
            if g is None:
                continue
            for parent, gp in zip(parents, vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = gp if prev is None else prev + gp
        for idx, seg in self._params.items():
            g = grads.get(idx)
            if g is not None:
                flat[seg.slice] += g.reshape(-1)
        return flat


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ConfigurationError("operation needs at least one Node operand")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Node, c: float) -> Node:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ConfigurationError(f"matmul: shapes {av.shape} and {bv.shape} are incompatible")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape.record(av @ bv, (a, b), vjp)


def linear(x, w: Node, b: Node | None = None) -> Node:
    """Affine map ``x @ w + b`` over the last axis of ``x``."""
    tape = _tape_of(x, w)
    x = _as_node(tape, x)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ConfigurationError(f"linear: input {xv.shape} does not match weight {wv.shape}")
    n_in, n_out = wv.shape
    x2 = xv.reshape(-1, n_in)
    out = x2 @ wv
    parents = [x, w]
    if b is not None:
        if b.value.shape != (n_out,):
            raise ConfigurationError(f"linear: bias {b.value.shape} does not match weight {wv.shape}")
        out += b.value
        parents.append(b)
    out = out.reshape(xv.shape[:-1] + (n_out,))

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return tape.record(out, parents, vjp)


def relu(x: Node) -> Node:
    on = x.value > 0
    return x.tape.record(np.maximum(x.value, 0.0), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Node) -> Node:
    """Tanh approximation of GELU."""
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return x.tape.record(out, (x,), vjp)


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return x.tape.record(t, (x,), lambda g: (g * (1.0 - t * t),))


def _softmax(v, axis):
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Node, axis: int = -1) -> Node:
    p = _softmax(x.value, axis)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return x.tape.record(p, (x,), vjp)


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    v = x.value
    n = v.shape[-1]
    if gamma.value.shape != (n,) or beta.value.shape != (n,):
        raise ConfigurationError("layer_norm: scale/shift must match the last axis")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value

    def vjp(g):
        gh = g * gv
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return x.tape.record(xhat * gv + beta.value, (x, gamma, beta), vjp)


def attention_bias(key_valid, T: int) -> np.ndarray:
    """Additive (B, 1, T, T) bias: 0 where a query may attend, -inf elsewhere.

    ``key_valid`` (B, T) marks keys that may be attended to; later tokens are
    always hidden. Passing ``None`` gives a purely causal (1, 1, T, T) bias.
    """
    bias = np.triu(np.full((T, T), -np.inf), k=1)[None, None]
    if key_valid is None:
        return bias
    key_valid = np.asarray(key_valid, dtype=bool)
    if key_valid.ndim != 2 or key_valid.shape[1] != T:
        raise ConfigurationError("attention: key_valid must have shape (B, T)")
    hidden = np.zeros(key_valid.shape)
    hidden[~key_valid] = -np.inf
    return bias + hidden[:, None, None, :]


def causal_attention(q: Node, k: Node, v: Node, n_heads: int, key_valid=None, bias=None) -> Node:
    """Multi-head causal scaled-dot-product attention on (B, T, D) inputs.

    Either ``key_valid`` (B, T) or a precomputed ``bias`` from
    :func:`attention_bias` restricts which keys each query sees.
    """
    B, T, D = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ConfigurationError("attention: q, k, v must share shape (B, T, D)")
    if D % n_heads:
        raise ConfigurationError(f"attention: width {D} not divisible by {n_heads} heads")
    dh = D // n_heads
    if bias is None:
        bias = attention_bias(key_valid, T)
    elif bias.shape[-2:] != (T, T) or bias.shape[0] not in (1, B):
        raise ConfigurationError("attention: bias shape does not match inputs")

    def split(a):
        return a.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.value), split(k.value), split(v.value)
    c = 1.0 / math.sqrt(dh)
    s = qh @ kh.transpose(0, 1, 3, 2)
    s *= c
    s += bias
    rowmax = s.max(axis=-1, keepdims=True)
    rowmax[~np.isfinite(rowmax)] = 0.0
    s -= rowmax
    p = np.exp(s, out=s)
    denom = p.sum(axis=-1, keepdims=True)
    denom[denom == 0] = 1.0
    p /= denom
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, T, D)

    def vjp(g):
        gh = split(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gs = gh @ vh.transpose(0, 1, 3, 2)
        gs -= (gs * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= c
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, T, D)

        return merge(gq), merge(gk), merge(gv)

    return q.tape.record(out, (q, k, v), vjp)


def dropout(x: Node, rate: float) -> Node:
    tape = x.tape
    if not tape.train or rate <= 0.0:
        return x
    keep = (tape.rng.random(x.shape) >= rate) / (1.0 - rate)
    return tape.record(x.value * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Shape ops


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {old} as {shape}") from None
    return x.tape.record(out, (x,), lambda g: (g.reshape(old),))


def stack(nodes: Sequence[Node], axis: int) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_as_node(tape, n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ConfigurationError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([n.value for n in nodes], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return tape.record(out, nodes, vjp)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_as_node(tape, n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(f"concat: {exc}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, nodes, vjp)


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) for k in key)


def index(x: Node, key) -> Node:
    """Basic or integer-array indexing ``x[key]``."""
    shape = x.shape
    out = x.value[key]
    basic = _is_basic(key)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return x.tape.record(np.array(out), (x,), vjp)


def total(x: Node) -> Node:
    shape = x.shape
    return x.tape.record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Node) -> Node:
    n = x.value.size
    return scale(total(x), 1.0 / n)


# ---------------------------------------------------------------------------
# Losses and scalar functions


def mse(pred: Node, target, weight=None) -> Node:
    """Weighted squared error: squared error summed over the last axis, then a
    weighted mean over the remaining positions.

    ``weight`` has the shape of ``pred`` without its last axis; zero weight
    excludes a position entirely.
    """
    tv = np.asarray(target, dtype=np.float64)
    if tv.shape != pred.shape:
        raise ConfigurationError(f"mse: prediction {pred.shape} vs target {tv.shape}")
    w = np.ones(pred.shape[:-1]) if weight is None else np.asarray(weight, dtype=np.float64)
    if w.shape != pred.shape[:-1]:
        raise ConfigurationError(f"mse: weight shape {w.shape} vs positions {pred.shape[:-1]}")
    wsum = w.sum()
    if wsum <= 0:
        raise ConfigurationError("mse: total weight must be positive")
    diff = pred.value - tv
    value = (w * (diff * diff).sum(axis=-1)).sum() / wsum
    return pred.tape.record(np.asarray(value), (pred,),
                            lambda g: (float(g) * 2.0 * diff * (w / wsum)[..., None],))


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy of integer ``labels`` given (B, C) logits."""
    labels = np.asarray(labels)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ConfigurationError(f"cross_entropy: logits {lv.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ConfigurationError("cross_entropy: label out of range")
    n = lv.shape[0]
    z = lv - lv.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (float(g) * d / n,)

    return logits.tape.record(np.asarray(value), (logits,), vjp)


def log(x: Node) -> Node:
    v = float(np.asarray(x.value).reshape(-1)[0]) if x.value.size == 1 else None
    if v is None:
        raise ConfigurationError("log is defined for scalar nodes only")
    if not v > 0.0:
        raise DomainError(f"log of non-positive value {v}")
    return x.tape.record(np.asarray(math.log(v)), (x,), lambda g: (g / v,))


# ---------------------------------------------------------------------------
# Parameter updates


def _check_lengths(*arrays):
    n = {np.shape(a)[0] if np.ndim(a) else -1 for a in arrays}
    if len(n) != 1:
        raise ConfigurationError(f"length mismatch: {[np.shape(a) for a in arrays]}")


def apply_masked_step(params: ParamVector, grad, mask, lr: float) -> ParamVector:
    """Plain masked gradient step; inactive coordinates are left bit-identical."""
    grad = np.asarray(grad, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_lengths(params.values, grad, mask)
    new = np.where(mask, params.values - lr * grad, params.values)
    return params.with_values(new)


class MaskedAdam:
    """Adam whose update is applied only on active mask coordinates.

    Moments see the (already masked) gradient everywhere, so a coordinate
    that is inactive for the current task decays its moments but never moves.
    """

    def __init__(self, size: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: ParamVector, grad, mask=None) -> ParamVector:
        grad = np.asarray(grad, dtype=np.float64)
        _check_lengths(params.values, grad, self.m)
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if mask is None:
            params.values[:] -= upd
        else:
            mask = np.asarray(mask, dtype=bool)
            _check_lengths(params.values, mask)
            np.subtract(params.values, upd, out=params.values, where=mask)
        return params


# ---------------------------------------------------------------------------
# Checkpoints: key-value manifest + raw little-endian float64 payload


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_params(stem, params: ParamVector, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.manifest`` and ``<stem>.f64``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = params.values.astype("<f8").tobytes()
    lines = [
        "format = harmodt-params-v1",
        f"size = {len(params)}",
        f"sha256 = {hashlib.sha256(payload).hexdigest()}",
    ]
    for s in params.layout:
        dims = "x".join(str(d) for d in s.shape)
        lines.append(f"segment = {s.name},{s.offset},{s.size},{s.fan_in},{s.fan_out},{s.kind},{dims}")
    if meta:
        lines.append(f"meta = {json.dumps(meta, sort_keys=True)}")
    manifest = stem.with_suffix(".manifest")
    array = stem.with_suffix(".f64")
    _atomic_write(array, payload)
    _atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest, array


def load_params(stem) -> tuple[ParamVector, dict]:
    stem = Path(stem)
    manifest = stem.with_suffix(".manifest")
    array = stem.with_suffix(".f64")
    fields: dict[str, list[str]] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"{manifest}: line {lineno} is not 'key = value'")
        fields.setdefault(key.strip(), []).append(value.strip())
    if fields.get("format") != ["harmodt-params-v1"]:
        raise DataError(f"{manifest}: unknown or missing format")
    size = int(fields["size"][0])
    segments = []
    for entry in fields.get("segment", []):
        name, off, sz, fi, fo, kind, dims = entry.split(",")
        shape = tuple(int(d) for d in dims.split("x"))
        segments.append(LayerSegment(name, int(off), int(sz), int(fi), int(fo), kind, shape))
    payload = array.read_bytes()
    if len(payload) != 8 * size:
        raise DataError(f"{array}: expected {8 * size} bytes, found {len(payload)} "
                        f"(truncated at offset {len(payload)})")
    if hashlib.sha256(payload).hexdigest() != fields["sha256"][0]:
        raise DataError(f"{array}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    meta = json.loads(fields["meta"][0]) if "meta" in fields else {}
    return ParamVector(segments, values), meta


def finite_difference(fn: Callable[[np.ndarray], float], theta, coords: Iterable[int] | None = None,
                      step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=np.float64)
    coords = range(theta.shape[0]) if coords is None else list(coords)
    out = np.zeros(theta.shape[0])
    for j in coords:
        orig = theta[j]
        theta[j] = orig + step
        up = fn(theta)
        theta[j] = orig - step
        down = fn(theta)
        theta[j] = orig
        out[j] = (up - down) / (2 * step)
    return out
