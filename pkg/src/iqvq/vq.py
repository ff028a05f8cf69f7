"""Codebooks, nearest-entry quantization and dual-codebook fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

COMMON = "common"
HQ_PLUS = "hq-plus"


@dataclass
class Codebook:
    entries: Tensor
    role: str = COMMON

    def __post_init__(self):
        if self.role not in (COMMON, HQ_PLUS):
            raise ValueError(f"unknown codebook role {self.role!r}")
        if self.entries.ndim != 2 or min(self.entries.shape) < 1:
            raise ShapeError("codebook entries must be a non-empty N×c matrix")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def init(cls, n: int, dim: int, rng: np.random.Generator, role: str = COMMON) -> "Codebook":
        data = rng.uniform(-1.0 / dim, 1.0 / dim, size=(n, dim))
        return cls(T.parameter(data, name=f"codebook.{role}"), role)

    def lookup(self, codes) -> Tensor:
        """Rows for ``codes`` with the index shape prepended to ``c``; differentiable
        with respect to the entries."""
        codes = np.asarray(codes, dtype=np.int64)
        return T.take_rows(self.entries, codes)


def nearest(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry for every row of ``z``; ties go to the lowest index."""
    # direct differences rather than the |z|²-2z·e+|e|² expansion keep exact ties exact
    d = ((z[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def quantize(z, codebook: Codebook) -> tuple[Tensor, np.ndarray]:
    """Map every latent vector (last axis) to its closest codebook entry.

    Returns the quantized tensor, differentiable with respect to the codebook
    entries only, and the integer codes with the latent's leading shape.
    """
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if zd.shape[-1] != codebook.dim:
        raise ShapeError(f"latent dim {zd.shape[-1]} != codebook dim {codebook.dim}")
    lead = zd.shape[:-1]
    codes = nearest(zd.reshape(-1, codebook.dim), codebook.entries.data).reshape(lead)
    return codebook.lookup(codes), codes


def fuse(zq1: Tensor, zq2: Tensor | None, s=None, s_thr: float = 0.9, alpha: float = 1.0) -> Tensor:
    """Dual-codebook fusion.

    With ``s`` given, entries whose score exceeds ``s_thr`` receive
    ``zq1 + alpha * zq2`` and the rest ``zq1`` (routing along the leading axis
    for batched input). With ``s=None`` both are always added.
    """
    if zq2 is None:
        return zq1
    if zq1.shape != zq2.shape:
        raise ShapeError(f"fuse shapes differ: {zq1.shape} vs {zq2.shape}")
    if s is None:
        return zq1 + alpha * zq2
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        return zq1 + alpha * zq2 if s > s_thr else zq1
    gate = (s > s_thr).astype(np.float64) * alpha
    gate = gate.reshape(gate.shape + (1,) * (zq2.ndim - gate.ndim))
    return zq1 + zq2 * gate


def codebook_loss(
    zh: Tensor, zq: Tensor, beta: float = 0.25, reduction: str = "sum", anchors=None
) -> Tensor:
    """``||sg(zh) - zq||² + beta·||zh - sg(zq)||²``.

    The first term moves codebook entries, the second commits the encoder.
    ``reduction``: ``"sum"`` over every element, ``"mean"`` over every element,
    or ``"vector"`` (squared norm of each latent vector, averaged over vectors).
    ``anchors`` replaces the stop-gradient operands ``(sg(zh), sg(zq))`` with
    fixed arrays, which turns the loss into an ordinary function for
    finite-difference checks.
    """
    if zh.shape != zq.shape:
        raise ShapeError(f"codebook_loss shapes differ: {zh.shape} vs {zq.shape}")
    if reduction == "sum":
        reduce = T.sum
    elif reduction == "mean":
        reduce = T.mean
    elif reduction == "vector":
        def reduce(x):
            return T.mean(x) * float(zh.shape[-1])
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if anchors is None:
        zh_c, zq_c = T.stop_gradient(zh), T.stop_gradient(zq)
    else:
        zh_c, zq_c = Tensor(anchors[0]), Tensor(anchors[1])
    embed = reduce(T.square(zh_c - zq))
    commit = reduce(T.square(zh - zq_c))
    return embed + beta * commit


straight_through = T.straight_through


def utilization(codes, n: int) -> float:
    """Fraction of the ``n`` entries used at least once."""
    return float(np.unique(np.asarray(codes)).size) / n
