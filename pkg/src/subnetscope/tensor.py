"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active record themselves on it
whenever one of their inputs requires a gradient.  Outside a tape everything
runs as plain numpy, which is what inference paths rely on for speed.

The rectifier's backward convention is a property of the whole backward pass
(``standard``, ``deconv`` or ``guided``); every other primitive ignores it.
"""

from __future__ import annotations

import threading
import weakref
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

BACKWARD_RULES = ("standard", "deconv", "guided")


class ShapeError(ValueError):
    """Input shapes are incompatible with the requested primitive."""


class AttributeRangeError(ValueError):
    """A primitive attribute (stride, padding, ...) is out of range."""


class DetachedError(RuntimeError):
    """Backward was requested for a value that is not on any tape."""


class Tensor:
    """An n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp", "_tape", "_index", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager; tapes are thread-confined.  Recorded tensors
    refer back to their tape weakly, so a graph is freed as soon as the
    tape is dropped; keep the tape (``with Tape() as tape``) to call
    :func:`backward` after the block exits.
    """

    __slots__ = ("nodes", "rule", "__weakref__")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.rule = "standard"

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor) -> None:
        out._tape = weakref.ref(self)
        out._index = len(self.nodes)
        self.nodes.append(out)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out._tape = None
    out._index = -1
    out._parents = ()
    out._vjp = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g, rule):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g, rule):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g, rule):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), vjp)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, "scale", (a,), lambda g, rule: (g * factor,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, rule):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def bias_add(x, bias) -> Tensor:
    """Add a per-feature bias along axis 1 (dense rows or conv channels)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} and {bias.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def vjp(g, rule):
        return g, g.sum(axis=axes) if bias.requires_grad else None

    return _make(x.data + bias.data.reshape(bshape), "bias_add", (x, bias), vjp)


def channel_mul(x, gates) -> Tensor:
    """Multiply channel ``j`` (axis 1) of ``x`` by ``gates[j]``."""
    x, gates = as_tensor(x), as_tensor(gates)
    if gates.ndim != 1 or x.ndim < 2 or x.shape[1] != gates.shape[0]:
        raise ShapeError(f"channel_mul: incompatible shapes {x.shape} and {gates.shape}")
    gshape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def vjp(g, rule):
        gx = g * gates.data.reshape(gshape) if x.requires_grad else None
        gg = (g * x.data).sum(axis=axes) if gates.requires_grad else None
        return gx, gg

    return _make(x.data * gates.data.reshape(gshape), "channel_mul", (x, gates), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def vjp(g, rule):
        if rule == "standard":
            return (g * positive,)
        if rule == "deconv":
            return (g * (g > 0),)
        return (g * ((g > 0) & positive),)

    return _make(np.where(positive, x.data, 0.0), "relu", (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, "sigmoid", (x,), lambda g, rule: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, rule):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), vjp)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g, rule):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), vjp)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise AttributeRangeError("log: input must be strictly positive")
    return _make(np.log(x.data), "log", (x,), lambda g, rule: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    if lo > hi:
        raise AttributeRangeError(f"clip: lo={lo} exceeds hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g, rule: (g * inside,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g, rule: (g * sign,))


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, rule):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), "sum", (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def vjp(g, rule):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis)), "mean", (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g, rule: (g.reshape(old),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: needs at least one input")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g, rule):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", xs, vjp)


def pick(x, index) -> Tensor:
    """Gather ``x[i, index[i]]`` for each row of a 2-D tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: incompatible shapes {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def vjp(g, rule):
        out = np.zeros(x.shape)
        out[rows, index] = g
        return (out,)

    return _make(x.data[rows, index], "pick", (x,), vjp)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_geometry(op, x, w, stride, padding):
    if stride < 1 or padding < 0:
        raise AttributeRangeError(f"{op}: stride must be >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: incompatible shapes {x.shape} and {w.shape}")
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"{op}: kernel {w.shape} larger than padded input {x.shape}")
    return ho, wo


def conv2d(x, w, stride: int = 1, padding: int = 0, method: str = "im2col") -> Tensor:
    """2-D cross-correlation, input N×C×H×W, kernel K×C×kh×kw.

    ``method="direct"`` accumulates one kernel offset at a time; ``"im2col"``
    lowers to a single matrix product.  Both share the same contract.
    """
    x, w = as_tensor(x), as_tensor(w)
    ho, wo = _conv_geometry("conv2d", x, w, stride, padding)
    if method == "im2col":
        return _conv_im2col(x, w, stride, padding, ho, wo)
    if method == "direct":
        return _conv_direct(x, w, stride, padding, ho, wo)
    raise AttributeRangeError(f"conv2d: unknown method {method!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out as (C·kh·kw) × (N·Ho·Wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _conv_im2col(x, w, s, p, ho, wo):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = _pad(x.data, p)
    cols = _im2col(xp, kh, kw, s, ho, wo)
    wmat = w.data.reshape(k, -1)
    out = (wmat @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)

    def vjp(g, rule):
        gmat = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if s == 1 and p <= kh - 1 and p <= kw - 1:
                # input gradient of a unit-stride conv is a full conv with the flipped kernel
                flipped = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p)))
                gcols = _im2col(gp, kh, kw, 1, h, wd)
                gx = (flipped.reshape(c, -1) @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            else:
                dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
                dxp = np.zeros((c, n) + xp.shape[2:])
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
                gx = dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _make(np.ascontiguousarray(out), "conv2d", (x, w), vjp)


def _conv_direct(x, w, s, p, ho, wo):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = _pad(x.data, p)
    out = np.zeros((n, k, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            out += np.einsum("nchw,kc->nkhw", patch, w.data[:, :, i, j])

    def vjp(g, rule):
        gw = np.zeros(w.shape) if w.requires_grad else None
        dxp = np.zeros(xp.shape) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                    gw[:, :, i, j] = np.einsum("nkhw,nchw->kc", g, patch)
                if dxp is not None:
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum("nkhw,kc->nchw", g, w.data[:, :, i, j])
        gx = dxp[:, :, p:p + h, p:p + wd] if dxp is not None else None
        return gx, gw

    return _make(out, "conv2d", (x, w), vjp)


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: needs N×C×H×W with even H, W, got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g, rule):
        spread = np.zeros(blocks.shape)
        np.put_along_axis(spread, arg[..., None], g[..., None], axis=-1)
        return (spread.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, "maxpool2x2", (x,), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2x2": maxpool2x2,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "clip": clip,
    "abs": absolute,
    "mean": mean,
    "sum": sum,
    "scale": scale,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "bias_add": bias_add,
    "affine": lambda x, w, b: bias_add(matmul(x, w), b),
    "channel_mul": channel_mul,
    "reshape": reshape,
    "pick": pick,
}


def forward_op(kind: str, inputs: Sequence, attrs: Mapping | None = None) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise AttributeRangeError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **dict(attrs or {}))


# ------------------------------------------------------------------ backward


class Gradients(Mapping):
    """Gradient map keyed by tensor identity."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._store[id(t)][1]

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._store

    def __iter__(self) -> Iterator[Tensor]:
        return (t for t, _ in self._store.values())

    def __len__(self) -> int:
        return len(self._store)

    def get(self, t, default=None):
        return self[t] if t in self else default

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._store:
            prev = self._store[key][1]
            self._store[key] = (t, prev + g)
        else:
            self._store[key] = (t, g)


def backward(loss: Tensor, rule: str = "standard") -> Gradients:
    """Propagate d(loss)/d(node) to every node and leaf reachable from ``loss``."""
    if rule not in BACKWARD_RULES:
        raise AttributeRangeError(f"unknown backward rule {rule!r}; expected one of {BACKWARD_RULES}")
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {getattr(loss, 'shape', None)}")
    tape = loss._tape() if loss._tape is not None else None
    if tape is None or tape.nodes[loss._index] is not loss:
        raise DetachedError("backward: loss was not recorded on a tape")
    tape.rule = rule
    grads = Gradients()
    grads._accumulate(loss, np.ones(loss.shape))
    for node in reversed(tape.nodes[: loss._index + 1]):
        entry = grads._store.get(id(node))
        if entry is None:
            continue
        parent_grads = node._vjp(entry[1], rule)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is not None and parent.requires_grad:
                grads._accumulate(parent, pg)
    return grads


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` may be keyed by parameter name or be a :class:`Gradients` map.
    """
    b1, b2 = betas
    resolved = {}
    for name, p in params.items():
        if isinstance(grads, Gradients):
            g = grads.get(p)
        else:
            g = grads.get(name)
        if g is None:
            raise KeyError(f"adam_step: missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        resolved[name] = g
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros(p.shape), np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state
