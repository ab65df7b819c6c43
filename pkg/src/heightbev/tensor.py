"""Dense double-precision arrays with tape-recorded reverse-mode gradients.

Only the primitives the pipeline needs are provided. Every op is a pure
function of its inputs; when a :class:`Tape` is active and at least one input
requires a gradient, the op appends a record holding a vector-Jacobian
closure. :func:`backward` replays the records in exact reverse order.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable n-d array node.

    ``param`` links a leaf to a named slot of a :class:`~heightbev.params.ParamSet`
    so that :func:`backward` can accumulate into its gradient buffer.
    """

    __slots__ = ("data", "requires_grad", "param", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, param=None, _owned: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            if not _owned:
                arr = arr.copy()
            arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered log of executed primitives; use as a context manager."""

    records: list[_Record] = field(default_factory=list)
    # when set, non-smooth ops log which side of each kink their inputs are on
    track_branches: bool = False
    branches: list = field(default_factory=list)
    _token: object = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def op_names(self) -> list[str]:
        return [r.name for r in self.records]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def note_branch(name: str, decision) -> None:
    """Log a discrete decision taken by a non-smooth op (ReLU sign, bilinear cell, ...).

    Finite-difference checks compare these logs to tell when a perturbation
    stepped across a kink. No-op unless the active tape tracks branches.
    """
    tape = _ACTIVE_TAPE.get()
    if tape is not None and tape.track_branches:
        tape.branches.append((name, np.array(decision, copy=True)))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    t = Tensor(out, requires_grad=needs, _owned=True)
    if needs:
        tape.records.append(_Record(t, inputs, vjp, name))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Gradients reaching parameter leaves are accumulated into their ParamSet
    buffers. Returns the gradient of every leaf that required one.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(r.out) for r in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    if not tape.records and loss.requires_grad:
        leaves[id(loss)] = loss
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        out[t] = g
        if t.param is not None:
            t.param.accumulate(g)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    note_branch("relu", pos)
    # np.maximum keeps NaN so divergence is not masked
    return _emit("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (x,), vjp)


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    x = as_tensor(x)
    d = np.maximum(x.data, floor) if floor > 0 else x.data
    live = x.data >= floor if floor > 0 else np.ones(x.shape, dtype=bool)
    if floor > 0:
        note_branch("log", live)
    return _emit("log", np.log(d), (x,), lambda g: (np.where(live, g / d, 0.0),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    note_branch("abs", np.sign(x.data))
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    note_branch("sqrt", out > 0)
    return _emit("sqrt", out, (x,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    out = x.data**p
    return _emit("power", out, (x,), lambda g: (g * p * x.data ** (p - 1),))


# ---------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def avg_pool(x, axes) -> Tensor:
    """Arithmetic mean over ``axes``; the pooled axes are dropped."""
    x = as_tensor(x)
    axes = tuple(np.atleast_1d(axes).tolist())
    if not axes:
        raise ShapeError("avg_pool needs at least one axis")
    for a in axes:
        if x.shape[a] == 0:
            raise ShapeError(f"avg_pool over empty axis {a} of shape {x.shape}")
    return mean(x, axes)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _emit("concat", out, xs, vjp)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", x.data[key], (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis; ``weight`` is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", out.reshape(lead + (weight.shape[0],)), inputs, vjp)


def mlp(x, params, prefix: str) -> Tensor:
    """linear -> ReLU -> linear using ``{prefix}.w1/b1/w2/b2`` from a ParamSet."""
    h = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def sparse_matmul(m: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense (n, c) tensor."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul shape mismatch: {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.data)
    mt = m.T.tocsr()
    return _emit("sparse_matmul", out, (x,), lambda g: (np.asarray(mt @ g),))


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (n, c, h, w, k, k) -> (n*h*w, c*k*k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernel`` is
    (C_out, C_in, k, k) with k odd.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    co, ci, k, k2 = kernel.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    cols = _im2col(xd, k)
    kmat = kernel.data.reshape(co, -1)
    out = cols @ kmat.T
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")
        out = out + bias.data
        inputs = (x, kernel, bias)
    out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def vjp(g):
        g4 = g if batched else g[None]
        gf = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (gf.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = correlation of g with the spatially flipped, channel-swapped kernel
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (_im2col(g4, k) @ kflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            if not batched:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, gf.sum(axis=0)

    return _emit("conv2d", out, inputs, vjp)


# ---------------------------------------------------------------- sampling


def bilinear_weights(points: np.ndarray, height: int, width: int):
    """Neighbour indices and weights for bilinear lookup with zero padding.

    ``points`` is (N, 2) as (u, v) = (column, row) with (0, 0) at the centre of
    the top-left pixel. Returns ``(rows, cols, weights, valid, frac)`` where the
    first four are (N, 4) and ``frac`` is the (N, 2) fractional part.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u, v = pts[:, 0], pts[:, 1]
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx, fy = u - x0, v - y0
    with np.errstate(invalid="ignore"):  # NaN coordinates only occur on divergence
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    valid = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return rows, cols, weights, valid, np.stack([fx, fy], axis=1)


def bilinear_matrix(points: np.ndarray, height: int, width: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (N, H*W) interpolation matrix and per-point in-bounds flag."""
    rows, cols, w, valid, _ = bilinear_weights(points, height, width)
    n = rows.shape[0]
    ri = np.repeat(np.arange(n), 4).reshape(n, 4)
    m = sp.csr_matrix(
        (w[valid], (ri[valid], (rows * width + cols)[valid])), shape=(n, height * width)
    )
    return m, valid.any(axis=1)


def bilinear_sample(fmap, points) -> tuple[Tensor, np.ndarray]:
    """Sample a (C, H, W) map at (N, 2) continuous pixel coordinates.

    Returns the (C, N) samples and a boolean in-bounds flag per point.
    Differentiable with respect to both the map and the coordinates.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    if fmap.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: map {fmap.shape}, points {points.shape}")
    c, h, w = fmap.shape
    rows, cols, wts, valid, frac = bilinear_weights(points.data, h, w)
    note_branch("bilinear", rows[:, 0] * (w + 2) + cols[:, 0])
    rr = np.clip(rows, 0, h - 1)
    cc = np.clip(cols, 0, w - 1)
    vals = fmap.data[:, rr, cc] * valid  # (C, N, 4)
    out = np.einsum("cnk,nk->cn", vals, wts)
    flag = valid.any(axis=1)

    def vjp(g):
        gm = gp = None
        if fmap.requires_grad:
            n = rows.shape[0]
            ri = np.repeat(np.arange(n), 4).reshape(n, 4)
            m = sp.csr_matrix(
                (wts[valid], (ri[valid], (rows * w + cols)[valid])), shape=(n, h * w)
            )
            gm = np.asarray(m.T @ g.T).T.reshape(c, h, w)
        if points.requires_grad:
            fx, fy = frac[:, 0], frac[:, 1]
            dwx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=1)
            dwy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=1)
            gv = np.einsum("cn,cnk->nk", g, vals)
            gp = np.stack([(gv * dwx).sum(1), (gv * dwy).sum(1)], axis=1)
        return gm, gp

    return _emit("bilinear_sample", out, (fmap, points), vjp), flag


# ---------------------------------------------------------------- encodings


def positional_encoding(height: int, width: int, channels: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table of shape (channels, height, width).

    The first half of the channels encode the row index and the second half
    the column index. Within each half, channel ``m`` uses frequency
    ``10000 ** (-2 * (m // 2) / half)`` with sine on even and cosine on odd
    ``m``.
    """
    if channels % 2:
        raise ShapeError(f"positional_encoding needs an even channel count, got {channels}")
    half = channels // 2
    m = np.arange(half)
    freq = 10000.0 ** (-2.0 * (m // 2) / half)
    is_sin = (m % 2) == 0

    def enc(pos: np.ndarray) -> np.ndarray:
        ang = freq[:, None] * pos[None, :]
        return np.where(is_sin[:, None], np.sin(ang), np.cos(ang))

    rows = enc(np.arange(height, dtype=np.float64))  # (half, H)
    cols = enc(np.arange(width, dtype=np.float64))  # (half, W)
    pe = np.empty((channels, height, width))
    pe[:half] = rows[:, :, None]
    pe[half:] = cols[:, None, :]
    return pe
