"""One seeded finite-difference case per differentiable kernel.

Each builder returns ``(f, params)`` for :func:`iqvq.tensor.check_gradients`.
Inputs stay away from kinks (abs at 0, clip bounds) and outside the domain
boundaries of log and sqrt.
"""

import numpy as np

from iqvq import tensor as T

P = T.parameter


def _away_from_zero(rng, shape, lo=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _weights(rng, shape):
    # a fixed random projection makes every output entry matter
    return T.Tensor(rng.normal(size=shape))


def _project(y, w):
    return T.sum(y * w)


def _unary(op, gen):
    def build(rng):
        x = P(gen(rng, (3, 4)))
        w = _weights(rng, (3, 4))
        return (lambda: _project(op(x), w)), [x]

    return build


def _binary(op, shape_b=(3, 4), positive_b=False):
    def build(rng):
        a = P(rng.normal(size=(3, 4)))
        b = P(rng.uniform(0.5, 2.0, shape_b) if positive_b else rng.normal(size=shape_b))
        w = _weights(rng, (3, 4))
        return (lambda: _project(op(a, b), w)), [a, b]

    return build


def _normal(rng, shape):
    return rng.normal(size=shape)


def _positive(rng, shape):
    return rng.uniform(0.3, 2.0, shape)


def _clip_safe(rng, shape):
    v = rng.uniform(-2.0, 2.0, shape)
    return np.where(np.abs(np.abs(v) - 1.0) < 0.1, v * 0.5, v)


def _conv(stride, padding):
    def build(rng):
        x = P(rng.normal(size=(2, 7, 7, 3)))
        k = P(rng.normal(size=(3, 3, 3, 4)))
        ho = (7 + 2 * padding - 3) // stride + 1
        w = _weights(rng, (2, ho, ho, 4))
        return (lambda: _project(T.conv2d(x, k, stride, padding), w)), [x, k]

    return build


def _matmul(rng):
    a = P(rng.normal(size=(2, 3, 4)))
    b = P(rng.normal(size=(4, 5)))
    w = _weights(rng, (2, 3, 5))
    return (lambda: _project(T.matmul(a, b), w)), [a, b]


def _avg_pool(rng):
    x = P(rng.normal(size=(2, 4, 4, 2)))
    w = _weights(rng, (2, 2, 2, 2))
    return (lambda: _project(T.avg_pool(x, 2), w)), [x]


def _upsample(rng):
    x = P(rng.normal(size=(2, 2, 2, 2)))
    w = _weights(rng, (2, 4, 4, 2))
    return (lambda: _project(T.upsample_nearest(x, 2), w)), [x]


def _axis_op(op):
    def build(rng):
        x = P(rng.normal(size=(3, 5)))
        w = _weights(rng, (3, 5))
        return (lambda: _project(op(x, axis=-1), w)), [x]

    return build


def _reduce(op, axis, keepdims):
    def build(rng):
        x = P(rng.normal(size=(3, 4, 2)))
        shape = np.asarray(op(T.Tensor(x.data), axis=axis, keepdims=keepdims).data).shape
        w = _weights(rng, shape)
        return (lambda: _project(op(x, axis=axis, keepdims=keepdims), w)), [x]

    return build


def _layer_norm(rng):
    x = P(rng.normal(size=(3, 6)))
    g = P(rng.uniform(0.5, 1.5, 6))
    b = P(rng.normal(size=6))
    w = _weights(rng, (3, 6))
    return (lambda: _project(T.layer_norm(x, g, b), w)), [x, g, b]


def _cross_entropy(rng):
    z = P(rng.normal(size=(5, 4)))
    t = rng.integers(0, 4, 5)
    return (lambda: T.softmax_cross_entropy(z, t)), [z]


def _shape_ops(rng):
    x = P(rng.normal(size=(2, 3, 4)))
    w = _weights(rng, (4, 6))
    return (lambda: _project(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), w)), [x]


def _index(rng):
    x = P(rng.normal(size=(5, 3)))
    w = _weights(rng, (3, 3))
    return (lambda: _project(x[np.array([0, 2, 2])], w)), [x]


def _take_rows(rng):
    table = P(rng.normal(size=(6, 3)))
    w = _weights(rng, (2, 2, 3))
    return (lambda: _project(T.take_rows(table, [[1, 4], [4, 0]]), w)), [table]


def _concat(rng):
    a = P(rng.normal(size=(2, 3)))
    b = P(rng.normal(size=(2, 2)))
    w = _weights(rng, (2, 5))
    return (lambda: _project(T.concat([a, b], axis=-1), w)), [a, b]


KERNEL_CASES = {
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, shape_b=(4,)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(T.mul, shape_b=(3, 1)),
    "div": _binary(T.div, positive_b=True),
    "square": _unary(T.square, _normal),
    "exp": _unary(T.exp, _normal),
    "log": _unary(T.log, _positive),
    "sqrt": _unary(T.sqrt, _positive),
    "abs": _unary(T.abs, _away_from_zero),
    "sigmoid": _unary(T.sigmoid, _normal),
    "silu": _unary(T.silu, _normal),
    "softplus": _unary(T.softplus, _normal),
    "clip": _unary(lambda x: T.clip(x, -1.0, 1.0), _clip_safe),
    "sum": _reduce(T.sum, None, False),
    "sum_axis": _reduce(T.sum, 1, False),
    "mean_keepdims": _reduce(T.mean, -1, True),
    "reshape_transpose": _shape_ops,
    "index": _index,
    "take_rows": _take_rows,
    "concat": _concat,
    "matmul": _matmul,
    "conv2d": _conv(1, 0),
    "conv2d_stride_pad": _conv(2, 1),
    "avg_pool": _avg_pool,
    "upsample_nearest": _upsample,
    "softmax": _axis_op(T.softmax),
    "log_softmax": _axis_op(T.log_softmax),
    "layer_norm": _layer_norm,
    "softmax_cross_entropy": _cross_entropy,
}


def kernel_error(name: str, seed: int = 0) -> float:
    f, params = KERNEL_CASES[name](np.random.default_rng(seed))
    return T.check_gradients(f, params, eps=1e-5)
