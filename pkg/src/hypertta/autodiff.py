"""A small reverse-mode differentiation engine over numpy float64 arrays.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires gradients. Outside a tape every op is a plain numpy
computation, which is how inference runs.

    with Tape() as tape:
        loss = some_graph(params)
    grads = tape.backward(loss, trainable_filter=lambda p: p.tag.startswith("ln"))
"""

from __future__ import annotations

import contextvars
import fnmatch
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
LN_EPS = 1e-5

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A trainable leaf. ``tag`` names it (e.g. ``"ln3.gamma"``)."""

    __slots__ = ("tag", "trainable", "grad")

    def __init__(self, value, tag: str, trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True)
        self.tag = tag
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.tag!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tag_filter(*patterns: str) -> Callable[[Parameter], bool]:
    return lambda p: any(fnmatch.fnmatchcase(p.tag, pat) for pat in patterns)


LN_AFFINE = tag_filter("ln*.gamma", "ln*.beta")


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, trainable_filter: Callable[[Parameter], bool] | None = None):
        """Accumulate d(loss)/d(param) into ``param.grad`` for every parameter passing the filter.

        Returns ``{tag: grad}`` for those parameters. Gradients still flow
        through frozen parameters' downstream paths; they just never land on
        a frozen leaf.
        """
        if self.consumed:
            raise StaleTapeError("tape already consumed; run the forward pass again")
        if not self.records:
            raise StaleTapeError("tape is empty")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        def wanted(p: Parameter) -> bool:
            return p.trainable and (trainable_filter is None or trainable_filter(p))

        live: set[int] = set()
        params: dict[int, Parameter] = {}
        needs_per_record = []
        for rec in self.records:
            needs = []
            for t in rec.inputs:
                if isinstance(t, Parameter) and wanted(t):
                    live.add(id(t))
                    params[id(t)] = t
                needs.append(id(t) in live)
            if any(needs):
                live.add(id(rec.out))
            needs_per_record.append(needs)

        grads = {id(loss): np.ones_like(loss.data)}
        for rec, needs in zip(reversed(self.records), reversed(needs_per_record)):
            g = grads.pop(id(rec.out), None)
            if g is None or not any(needs):
                continue
            in_grads = rec.backward(g, needs)
            for t, need, gi in zip(rec.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, p in params.items():
            g = grads.get(key)
            if g is not None:
                p.grad += g
                out[p.tag] = g
        return out


def _record(out_data, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape.records.append(_Record(out, tuple(inputs), backward))
        return out
    return Tensor(out_data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record(a.data * b.data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g, needs: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    ok = a.data > floor
    safe = np.where(ok, a.data, floor)
    return _record(np.log(safe), (a,), lambda g, needs: (np.where(ok, g / safe, 0.0),))


# --- reductions and shape ---------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inverse),))


def take(a, indices, axis: int) -> Tensor:
    """Select entries along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g, needs):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(np.take(a.data, idx, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


# --- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(np.matmul(a.data, b.data), (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), backward)


def layernorm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gamma + beta over the last axis (biased variance)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layernorm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g, needs):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if needs[1]:
            gg = (g * xhat).sum(axis=lead)
        if needs[2]:
            gb = g.sum(axis=lead)
        if needs[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward)


# --- convolution ---------------------------------------------------------------------


def _reflect_map(n: int, r: int) -> np.ndarray:
    idx = np.arange(-r, n + r)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _fold_reflect(g: np.ndarray, h: int, w: int, r: int) -> np.ndarray:
    """Adjoint of reflect padding on the last two axes."""
    rows, cols = _reflect_map(h, r), _reflect_map(w, r)
    tmp = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
    for i, src in enumerate(rows):
        tmp[..., src, :] += g[..., i, :]
    out = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
    for j, src in enumerate(cols):
        out[..., :, src] += tmp[..., :, j]
    return out


def conv2d(x, kernels, bias=None) -> Tensor:
    """Same-size 2-D cross-correlation (no kernel flip) with reflect padding.

    ``x`` is ``(B, C_in, h, w)`` or ``(C_in, h, w)``; ``kernels`` is
    ``(C_out, C_in, k, k)`` with odd ``k``; ``bias`` is ``(C_out,)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels.shape}")
    n, c, h, w = xd.shape
    o, ci, k, k2 = kernels.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    r = k // 2
    # channel-last padded input; one im2col product per kernel row
    xcl = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    if r:
        rows, cols = _reflect_map(h, r), _reflect_map(w, r)
        xp = xcl[:, rows[:, None], cols[None, :], :]
    else:
        xp = xcl
    kd = kernels.data
    krow = np.ascontiguousarray(kd.transpose(2, 0, 3, 1)).reshape(k, o, k * c)  # [i, o, (j, c)]

    def row_cols(i):
        win = sliding_window_view(xp[:, i : i + h], k, axis=2)  # n, h, w, c, j
        return win.transpose(0, 1, 2, 4, 3).reshape(n * h * w, k * c)

    acc = np.zeros((n * h * w, o))
    for i in range(k):
        acc += row_cols(i) @ krow[i].T
    inputs = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias must have shape ({o},)")
        acc += bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(acc.reshape(n, h, w, o).transpose(0, 3, 1, 2))
    if unbatched:
        out = out[0]

    def backward(g, needs):
        g4 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
        gx = gk = gb = None
        if needs[1]:
            gk = np.empty((k, o, k, c))
            for i in range(k):
                gk[i] = (g2.T @ row_cols(i)).reshape(o, k, c)
            gk = gk.transpose(1, 3, 0, 2)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        if needs[0]:
            gxp = np.zeros((n, h + 2 * r, w + 2 * r, c))
            for i in range(k):
                gcol = (g2 @ krow[i]).reshape(n, h, w, k, c)
                for j in range(k):
                    gxp[:, i : i + h, j : j + w, :] += gcol[:, :, :, j, :]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = _fold_reflect(gxp, h, w, r) if r else np.ascontiguousarray(gxp)
            if unbatched:
                gx = gx[0]
        return (gx, gk, gb)[: len(needs)]

    return _record(out, inputs, backward)
