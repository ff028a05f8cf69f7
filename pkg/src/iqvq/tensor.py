"""Dense float64 tensors with reverse-mode differentiation.

Every model in the package is composed from the kernels defined here. A
``Tensor`` wraps a numpy array; operations on tensors that require gradients
record a closure on the result, and :meth:`Tensor.backward` replays those
closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading axes and axes broadcast from extent 1
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_suffix(a: Tensor, b: Tensor):
    # one operand must broadcast into the other's shape (bias, keepdims stats, scalars)
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    try:
        full = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"incompatible shapes {sa} and {sb}") from None
    if full != sa and full != sb:
        raise ShapeError(f"incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def square(x: Tensor) -> Tensor:
    return _make(x.data**2, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def back(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (x,), back)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def straight_through(forward: Tensor, value: Tensor) -> Tensor:
    """Return ``value`` in the forward pass; route the incoming gradient to
    ``forward`` unchanged. ``value`` receives no gradient."""
    if forward.shape != value.shape:
        raise ShapeError(f"straight_through shapes differ: {forward.shape} vs {value.shape}")
    return _make(value.data.copy(), (forward,), lambda g: (g,))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back)


def take_rows(table: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D table: ``table[rows]`` for an integer index array."""
    rows = np.asarray(rows, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise IndexError("row index out of range")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, rows.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[rows], (table,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy ``matmul`` semantics; a 2-D right operand is shared across leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on channels-last input.

    ``x`` is ``H×W×Cin`` or ``N×H×W×Cin``; ``kernel`` is ``k×k×Cin×Cout``.
    Zero padding; output extents ``(H + 2p - k)//s + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 3/4-D input and 4-D kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = xd.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2:
        raise ShapeError("conv2d kernel must be square")
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels, kernel expects {kcin}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, cin, k, k) -> (n*ho*wo, k*k*cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding, :]
            gx = gxp[0] if squeeze else gxp
        return gx, gk

    return _make(out, (x, kernel), back)


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Non-overlapping ``r×r`` block averaging over the two spatial axes before channels."""
    if r == 1:
        return x
    *lead, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"extents {h}x{w} not divisible by {r}")
    blocks = x.data.reshape(*lead, h // r, r, w // r, r, c)
    out = blocks.mean(axis=(-4, -2))

    def back(g):
        g = np.repeat(np.repeat(g, r, axis=-3), r, axis=-2) / (r * r)
        return (g,)

    return _make(out, (x,), back)


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    if r == 1:
        return x
    *lead, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, r, axis=-3), r, axis=-2)

    def back(g):
        return (g.reshape(*lead, h, r, w, r, c).sum(axis=(-4, -2)),)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gb = flat_g.sum(axis=0)
        return gx, gg, gb

    return _make(xhat * gain.data + bias.data, (x, gain, bias), back)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits_row)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError("logits must be n×K")
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = -logp[rows, targets].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(out), (logits,), back)


# ---------------------------------------------------------------- gradient checking


class NumericalError(ArithmeticError):
    pass


def check_gradients(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated with each parameter entry perturbed in place by
    ``±eps``. Returns the maximum over checked entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. With
    ``max_entries`` set, a seeded random subset of at most that many entries per
    parameter is checked instead of all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericalError("f is non-finite at the base point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            if not flat.flags.writeable or not np.shares_memory(flat, p.data):
                raise ValueError("parameter data must be a writeable contiguous array")
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for e in entries:
                orig = flat[e]
                flat[e] = orig + eps
                fp = float(f().data)
                flat[e] = orig - eps
                fm = float(f().data)
                flat[e] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericalError(f"non-finite value perturbing parameter {pi} entry {e}")
                num = (fp - fm) / (2.0 * eps)
                ana = analytic[pi].reshape(-1)[e]
                err = float(np.abs(ana - num) / max(1.0, np.abs(ana), np.abs(num)))
                worst = max(worst, err)
    return worst
