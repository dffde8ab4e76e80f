"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive lives in ``OPS`` as a forward/backward pair.
Public functions look the pair up by name at call time, so the gradient
checker (and its tests) can swap a rule and observe the effect.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_state = threading.local()


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# precision


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextmanager
def precision(dtype):
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def resolve_dtype(name: str) -> np.dtype:
    return {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}[name]


# --------------------------------------------------------------------------
# tensors


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._node: tuple[Tape, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors convert to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    shape: tuple[int, ...]
    vjp: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class OpDef:
    name: str
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(name: str, forward: Callable, backward: Callable) -> OpDef:
    OPS[name] = OpDef(name, forward, backward)
    return OPS[name]


def apply(name: str, *inputs: Tensor, **kwargs) -> Tensor:
    op = OPS[name]
    out, saved = op.forward(*(t.data for t in inputs), **kwargs)
    # one summation pass; confirm with the exact scan only when it trips
    if not np.isfinite(np.sum(out)) and not np.all(np.isfinite(out)):
        raise NumericalError(f"{name} produced non-finite values")
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        backward_rule = op.backward

        def vjp(g, needs, _saved=saved, _rule=backward_rule):
            return _rule(_saved, g, needs)

        tape.nodes.append(Node(name, tuple(inputs), out.shape, vjp))
        result.requires_grad = True
        result._node = (tape, len(tape.nodes) - 1)
    return result


def _accumulate(store: dict, key, value: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = value if prev is None else prev + value


def _backprop(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss is not on an active tape")
    tape, start = loss._node
    node_grads: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for index in range(start, -1, -1):
        g = node_grads.pop(index, None)
        if g is None:
            continue
        node = tape.nodes[index]
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi, need in zip(node.inputs, node.vjp(g, needs), needs):
            if not need or gi is None:
                continue
            if gi.shape != t.shape:
                raise TapeError(f"{node.op} returned gradient of shape {gi.shape} for input {t.shape}")
            if t._node is not None:
                if t._node[0] is not tape:
                    raise TapeError("tensor recorded on a different tape")
                _accumulate(node_grads, t._node[1], gi)
            else:
                prev = leaf_grads.get(id(t))
                leaf_grads[id(t)] = (t, gi if prev is None else prev[1] + gi)
    return leaf_grads


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss, keyed by parameter name.

    When ``params`` is given, every non-frozen one appears in the map (zeros
    when unused); otherwise only parameters reached from the loss do.
    """
    leaf = _backprop(loss)
    if params is None:
        return {
            t.name: Tensor(g, dtype=g.dtype)
            for t, g in leaf.values()
            if isinstance(t, Parameter) and not t.frozen
        }
    grads = {}
    for p in params:
        if p.frozen:
            continue
        hit = leaf.get(id(p))
        g = hit[1] if hit is not None else np.zeros_like(p.data)
        grads[p.name] = Tensor(g, dtype=g.dtype)
    return grads


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to arbitrary leaf tensors."""
    leaf = _backprop(loss)
    return [leaf[id(t)][1] if id(t) in leaf else np.zeros_like(t.data) for t in inputs]


# --------------------------------------------------------------------------
# primitive rules


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(s, g, needs):
    return _unbroadcast(g, s[0]), _unbroadcast(g, s[1])


def _sub_fwd(a, b):
    return a - b, (a.shape, b.shape)


def _sub_bwd(s, g, needs):
    return _unbroadcast(g, s[0]), _unbroadcast(-g, s[1])


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(s, g, needs):
    a, b = s
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _div_fwd(a, b):
    return a / b, (a, b)


def _div_bwd(s, g, needs):
    a, b = s
    return (
        _unbroadcast(g / b, a.shape) if needs[0] else None,
        _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
    )


def _neg_fwd(a):
    return -a, None


def _neg_bwd(s, g, needs):
    return (-g,)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _matmul_fwd(a, b, exact=False):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    if exact:
        if b.ndim == 2:
            return np.einsum("...i,ij->...j", a, b), (a, b, True)
        if a.shape[:-2] != b.shape[:-2]:
            raise ValueError("row-exact batched matmul needs matching leading axes")
        return np.einsum("...ij,...jk->...ik", a, b), (a, b, True)
    return np.matmul(a, b), (a, b, False)


def _matmul_bwd(s, g, needs):
    a, b, exact = s
    if exact and b.ndim > 2:
        ga = np.einsum("...ik,...jk->...ij", g, b) if needs[0] else None
        gb = np.einsum("...ij,...ik->...jk", a, g) if needs[1] else None
        return ga, gb
    if exact:
        # per-row kernels: results never depend on which other rows are present
        ga = np.einsum("...j,ij->...i", g, b) if needs[0] else None
        gb = None
        if needs[1]:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            # rows with zero gradient are dropped, so a cell that contributes
            # nothing cannot change how the remaining rows are reduced
            live = np.any(g2 != 0, axis=1)
            gb = np.matmul(a2[live].T, g2[live]) if live.any() else np.zeros(b.shape, dtype=b.dtype)
        return ga, gb
    ga = _unbroadcast(np.matmul(g, _swap(b)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.matmul(_swap(a), g), b.shape) if needs[1] else None
    return ga, gb


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_bwd(s, g, needs):
    shape, axis, keepdims = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _mean_fwd(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return np.mean(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, count)


def _mean_bwd(s, g, needs):
    shape, axis, keepdims, count = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_bwd(s, g, needs):
    return (g * s,)


def _log_fwd(a):
    if np.any(a <= 0):
        raise NumericalError("log of non-positive value")
    return np.log(a), a


def _log_bwd(s, g, needs):
    return (g / s,)


def _sqrt_fwd(a):
    out = np.sqrt(a)
    return out, out


def _sqrt_bwd(s, g, needs):
    return (g / (2.0 * s),)


def _clamp_fwd(a, lo=None, hi=None):
    out = np.clip(a, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a > lo
    if hi is not None:
        inside &= a < hi
    return out, inside


def _clamp_bwd(s, g, needs):
    return (g * s,)


def _reshape_fwd(a, shape=()):
    return a.reshape(shape), a.shape


def _reshape_bwd(s, g, needs):
    return (g.reshape(s),)


def _transpose_fwd(a, axes=None):
    return np.transpose(a, axes), axes


def _transpose_bwd(s, g, needs):
    if s is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(s)),)


def scatter_add(out: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[rows[i]] += values[i]`` in order of appearance, like ``np.add.at``.

    Rows are grouped with a stable sort and each group is summed
    sequentially before landing in ``out``; much faster than ``add.at``.
    """
    rows = rows.reshape(-1)
    values = values.reshape((len(rows),) + out.shape[1:])
    if len(rows) == 0:
        return out
    order = np.argsort(rows, kind="stable")
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.r_[True, sorted_rows[1:] != sorted_rows[:-1]])
    out[sorted_rows[starts]] += np.add.reduceat(values[order], starts, axis=0)
    return out


def _getitem_fwd(a, index=None):
    return np.array(a[index]), (a.shape, index)


def _getitem_bwd(s, g, needs):
    shape, index = s
    out = np.zeros(shape, dtype=g.dtype)
    if isinstance(index, np.ndarray) and index.dtype.kind in "iu":
        scatter_add(out, np.where(index < 0, index + shape[0], index), g)
    else:
        np.add.at(out, index, g)
    return (out,)


def _concat_fwd(*arrays, axis=0):
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (sizes, axis)


def _concat_bwd(s, g, needs):
    sizes, axis = s
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _stack_fwd(*arrays, axis=0):
    return np.stack(arrays, axis=axis), axis


def _stack_bwd(s, g, needs):
    return tuple(np.moveaxis(g, s, 0))


def _softmax_fwd(x, axis=-1, mask=None):
    if mask is None:
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=axis)):
            raise ValueError("softmax mask leaves an empty row")
        masked = x + np.where(mask, 0.0, -np.inf).astype(x.dtype)
        e = np.exp(masked - np.max(masked, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(s, g, needs):
    y, axis = s
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def _cosine_fwd(u, v, axis=-1, eps=1e-8):
    nu = np.sqrt(np.sum(u * u, axis=axis, keepdims=True))
    nv = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    dot = np.sum(u * v, axis=axis, keepdims=True)
    denom = nu * nv + eps
    out = dot / denom
    return np.squeeze(out, axis=axis), (u, v, nu, nv, dot, denom, axis)


def _cosine_bwd(s, g, needs):
    u, v, nu, nv, dot, denom, axis = s
    g = np.expand_dims(g, axis)
    scale = g / denom
    # d||u||/du = u/||u||, defined as 0 at the origin
    safe_nu = np.where(nu > 0, nu, 1.0)
    safe_nv = np.where(nv > 0, nv, 1.0)
    coef = g * dot / (denom * denom)
    gu = scale * v - coef * nv * np.where(nu > 0, u / safe_nu, 0.0)
    gv = scale * u - coef * nu * np.where(nv > 0, v / safe_nv, 0.0)
    return (
        _unbroadcast(gu, u.shape) if needs[0] else None,
        _unbroadcast(gv, v.shape) if needs[1] else None,
    )


def _bilinear_weights(points, height, width):
    """Corner indices and weights for clamped continuous coordinates."""
    x = np.clip(points[..., 0], 0.0, 1.0)
    y = np.clip(points[..., 1], 0.0, 1.0)
    px = x * (width - 1)
    py = y * (height - 1)
    x0 = np.minimum(np.floor(px), max(width - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(py), max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (px - x0).astype(points.dtype)
    fy = (py - y0).astype(points.dtype)
    inside_x = (points[..., 0] > 0.0) & (points[..., 0] < 1.0)
    inside_y = (points[..., 1] > 0.0) & (points[..., 1] < 1.0)
    return x0, x1, y0, y1, fx, fy, inside_x, inside_y


def _bilinear_fwd(fmap, points, batch_index=None):
    if fmap.size == 0:
        raise ValueError("cannot sample an empty map")
    if batch_index is None and fmap.ndim != 3:
        raise ValueError("unbatched sampling needs a (H, W, d) map")
    height, width, dim = fmap.shape[-3], fmap.shape[-2], fmap.shape[-1]
    x0, x1, y0, y1, fx, fy, ix, iy = _bilinear_weights(points, height, width)
    b = 0 if batch_index is None else np.broadcast_to(batch_index, x0.shape)
    base = b * height
    index = np.stack(
        [(base + y0) * width + x0, (base + y0) * width + x1, (base + y1) * width + x0, (base + y1) * width + x1],
        axis=-1,
    ).reshape(-1, 4)
    gx, gy = fx.reshape(-1), fy.reshape(-1)
    weights = np.stack([(1 - gx) * (1 - gy), gx * (1 - gy), (1 - gx) * gy, gx * gy], axis=-1)
    corners = np.take(fmap.reshape(-1, dim), index, axis=0)  # (P, 4, d)
    out = np.einsum("pk,pkd->pd", weights, corners)
    saved = (fmap.shape, points, index, weights, corners, fx, fy, ix, iy)
    return out.reshape(x0.shape + (dim,)), saved


def _bilinear_bwd(s, g, needs):
    shape, points, index, weights, corners, fx, fy, ix, iy = s
    height, width, dim = shape[-3], shape[-2], shape[-1]
    g2 = g.reshape(-1, dim)
    gmap = None
    if needs[0]:
        n_points = len(index)
        spread = sparse.csr_matrix(
            (weights.reshape(-1), index.reshape(-1), np.arange(0, 4 * n_points + 1, 4)),
            shape=(n_points, int(np.prod(shape[:-1]))),
        )
        # transpose product walks the points in order, so a point with zero
        # gradient adds exact zeros and leaves the other sums untouched
        gmap = np.asarray(spread.T @ g2, dtype=g.dtype).reshape(shape)
    gpts = None
    if needs[1]:
        # g . corner for the corners (00, 01, 10, 11)
        dots = np.einsum("pd,pkd->pk", g2, corners)
        wx, wy = fx.reshape(-1), fy.reshape(-1)
        dfx = ((1 - wy) * (dots[:, 1] - dots[:, 0]) + wy * (dots[:, 3] - dots[:, 2])).reshape(fx.shape)
        dfy = ((1 - wx) * (dots[:, 2] - dots[:, 0]) + wx * (dots[:, 3] - dots[:, 1])).reshape(fy.shape)
        gx = np.where(ix, dfx * (width - 1), 0.0)
        gy = np.where(iy, dfy * (height - 1), 0.0)
        gpts = np.stack([gx, gy], axis=-1).astype(points.dtype)
    return gmap, gpts


def _pool_counts(n):
    out = -(-n // 2)
    counts = np.full(out, 2.0)
    if n % 2:
        counts[-1] = 1.0
    return out, counts


def _avgpool_fwd(x):
    height, width = x.shape[-3], x.shape[-2]
    oh, ch = _pool_counts(height)
    ow, cw = _pool_counts(width)
    pad = [(0, 0)] * x.ndim
    pad[-3] = (0, 2 * oh - height)
    pad[-2] = (0, 2 * ow - width)
    xp = np.pad(x, pad)
    lead = x.shape[:-3]
    blocks = xp.reshape(lead + (oh, 2, ow, 2, x.shape[-1]))
    total = blocks.sum(axis=(-4, -2))
    counts = (ch[:, None] * cw[None, :])[..., None].astype(x.dtype)
    return total / counts, (x.shape, counts)


def _avgpool_bwd(s, g, needs):
    shape, counts = s
    height, width = shape[-3], shape[-2]
    spread = g / counts
    spread = np.repeat(np.repeat(spread, 2, axis=-3), 2, axis=-2)
    return (np.array(spread[..., :height, :width, :]),)


register("add", _add_fwd, _add_bwd)
register("sub", _sub_fwd, _sub_bwd)
register("mul", _mul_fwd, _mul_bwd)
register("div", _div_fwd, _div_bwd)
register("neg", _neg_fwd, _neg_bwd)
register("matmul", _matmul_fwd, _matmul_bwd)
register("sum", _sum_fwd, _sum_bwd)
register("mean", _mean_fwd, _mean_bwd)
register("exp", _exp_fwd, _exp_bwd)
register("log", _log_fwd, _log_bwd)
register("sqrt", _sqrt_fwd, _sqrt_bwd)
register("clamp", _clamp_fwd, _clamp_bwd)
register("reshape", _reshape_fwd, _reshape_bwd)
register("transpose", _transpose_fwd, _transpose_bwd)
register("getitem", _getitem_fwd, _getitem_bwd)
register("concat", _concat_fwd, _concat_bwd)
register("stack", _stack_fwd, _stack_bwd)
register("softmax", _softmax_fwd, _softmax_bwd)
register("cosine_similarity", _cosine_fwd, _cosine_bwd)
register("bilinear_sample", _bilinear_fwd, _bilinear_bwd)
register("avg_pool2x2", _avgpool_fwd, _avgpool_bwd)


# --------------------------------------------------------------------------
# functional surface


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


def add(a, b) -> Tensor:
    return apply("add", *_pair(a, b))


def sub(a, b) -> Tensor:
    return apply("sub", *_pair(a, b))


def mul(a, b) -> Tensor:
    return apply("mul", *_pair(a, b))


def div(a, b) -> Tensor:
    return apply("div", *_pair(a, b))


def neg(a: Tensor) -> Tensor:
    return apply("neg", a)


def matmul(a: Tensor, b: Tensor, exact: bool = False) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading ones.

    ``exact=True`` uses per-row kernels so each output row is bit-identical
    however many other rows (or batch items) are present. The right operand
    is then either 2-d or carries the same leading axes as the left.
    """
    return apply("matmul", a, b, exact=exact)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply("mean", a, axis=axis, keepdims=keepdims)


def exp(a: Tensor) -> Tensor:
    return apply("exp", a)


def log(a: Tensor) -> Tensor:
    return apply("log", a)


def sqrt(a: Tensor) -> Tensor:
    return apply("sqrt", a)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    return apply("clamp", a, lo=lo, hi=hi)


def reshape(a: Tensor, shape) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def transpose(a: Tensor, axes=None) -> Tensor:
    return apply("transpose", a, axes=None if axes is None else tuple(axes))


def getitem(a: Tensor, index) -> Tensor:
    return apply("getitem", a, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis != 0:
        raise ValueError("stack only supports axis 0")
    return apply("stack", *tensors, axis=axis)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; ``mask`` (True = keep) pins excluded slots to exactly 0."""
    return apply("softmax", x, axis=axis, mask=mask)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return apply("cosine_similarity", u, v, axis=axis, eps=eps)


def bilinear_sample(fmap: Tensor, points: Tensor, batch_index: np.ndarray | None = None) -> Tensor:
    """Sample a ``(..., H, W, d)`` map at continuous points in [0, 1]^2.

    ``points[..., 0]`` is x (along W), ``points[..., 1]`` is y (along H);
    coordinates outside the unit square clamp to the border. With
    ``batch_index`` the map carries a leading batch axis and each point
    names the slice it reads.
    """
    return apply("bilinear_sample", fmap, points, batch_index=batch_index)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling over the (H, W) axes of ``(..., H, W, d)``; ceil at odd sizes."""
    return apply("avg_pool2x2", x)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()))
