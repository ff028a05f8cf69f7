"""No-reference quality proxies, corpus normalization, ensembling and binning.

Three differentiable proxies drive training:

* sharpness: mean Sobel gradient magnitude,
* contrast: pixel standard deviation,
* high-frequency energy: mean absolute 3×3 Laplacian response.

A fourth proxy (mean absolute difference-of-Gaussians response) is kept out
of every training objective and only used to judge optimization results.
All spatial filters are applied without padding so constant images score 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-5
N_BINS = 10
PROXY_NAMES = ("sharpness", "contrast", "laplacian")

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _dog_kernel(size: int = 5, s1: float = 1.0, s2: float = 1.6) -> np.ndarray:
    ax = np.arange(size) - size // 2
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    g1 = np.exp(-d2 / (2 * s1**2))
    g2 = np.exp(-d2 / (2 * s2**2))
    return g1 / g1.sum() - g2 / g2.sum()


DOG = _dog_kernel()


def _as_batch(images) -> Tensor:
    """Lift ``H×W``, ``N×H×W`` or ``N×H×W×C`` input to an ``N×H×W×C`` tensor.

    Three-dimensional input is a single-channel batch, as produced by the
    corpus generator and the degrader.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 2:
        x = T.reshape(x, (1, *x.shape, 1))
    elif x.ndim == 3:
        x = T.reshape(x, (*x.shape, 1))
    if x.ndim != 4:
        raise T.ShapeError(f"expected an image or image batch, got shape {x.shape}")
    return x


def _filter(x: Tensor, k: np.ndarray) -> Tensor:
    # per-channel response: fold channels into the batch axis
    n, h, w, c = x.shape
    xc = T.reshape(T.transpose(x, (0, 3, 1, 2)), (n * c, h, w, 1))
    r = T.conv2d(xc, Tensor(k.reshape(*k.shape, 1, 1)))
    return T.reshape(r, (n, c, r.shape[1], r.shape[2]))


def sharpness(images) -> Tensor:
    x = _as_batch(images)
    gx = _filter(x, SOBEL_X)
    gy = _filter(x, SOBEL_Y)
    mag = T.sqrt(T.square(gx) + T.square(gy))
    return T.mean(T.reshape(mag, (x.shape[0], -1)), axis=1)


def contrast(images) -> Tensor:
    """Population standard deviation per channel, averaged over channels."""
    x = _as_batch(images)
    n, h, w, c = x.shape
    xc = T.transpose(x, (0, 3, 1, 2))
    xc = T.reshape(xc, (n, c, h * w))
    # shift by the first pixel (a constant, so the variance is unchanged) so
    # that flat images give exactly zero instead of rounding residue
    xc = xc - Tensor(xc.data[:, :, :1])
    mu = T.mean(xc, axis=2, keepdims=True)
    var = T.mean(T.square(xc - mu), axis=2)
    return T.mean(T.sqrt(var), axis=1)


def laplacian_energy(images) -> Tensor:
    x = _as_batch(images)
    r = T.abs(_filter(x, LAPLACIAN))
    return T.mean(T.reshape(r, (x.shape[0], -1)), axis=1)


def dog_energy(images) -> Tensor:
    """Held-out judge: mean absolute 5×5 difference-of-Gaussians response."""
    x = _as_batch(images)
    r = T.abs(_filter(x, DOG))
    return T.mean(T.reshape(r, (x.shape[0], -1)), axis=1)


PROXIES = (sharpness, contrast, laplacian_energy)


def proxy_scores(images) -> Tensor:
    """Raw ``(P1, P2, P3)`` per image as an ``N×3`` tensor (differentiable)."""
    x = _as_batch(images)
    cols = [T.reshape(p(x), (x.shape[0], 1)) for p in PROXIES]
    return T.concat(cols, axis=1)


def raw_scores(images) -> np.ndarray:
    """Non-differentiable convenience: raw proxies as an ``N×3`` array."""
    with T.no_grad():
        return proxy_scores(images).data.copy()


def normalize(raw, s_min, s_max):
    """Min–max normalization with a 1e-5 guard, clamped to ``[0, 1)``.

    Works on floats/arrays and on tensors (then differentiable inside the clamp).
    """
    s_min = np.asarray(s_min, dtype=np.float64)
    denom = np.asarray(s_max, dtype=np.float64) - s_min + NORM_EPS
    upper = np.nextafter(1.0, 0.0)
    if isinstance(raw, Tensor):
        return T.clip((raw - s_min) / denom, 0.0, upper)
    out = np.clip((np.asarray(raw, dtype=np.float64) - s_min) / denom, 0.0, upper)
    return float(out) if out.ndim == 0 else out


def ensemble(normalized) -> float | np.ndarray:
    """Arithmetic mean of normalized proxy scores (over the last axis)."""
    a = np.asarray(normalized, dtype=np.float64)
    if a.size == 0 or a.shape[-1] == 0:
        raise ValueError("ensemble of an empty score list")
    out = a.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def bin_score(s):
    """``clamp(floor(10·S), 0, 9)``; vectorized for arrays."""
    a = np.asarray(s, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("quality score must be non-negative")
    b = np.clip(np.floor(a * N_BINS), 0, N_BINS - 1).astype(np.int64)
    return int(b) if b.ndim == 0 else b


@dataclass(frozen=True)
class QualityReport:
    raw: tuple[float, float, float]
    normalized: tuple[float, float, float]
    ensemble: float
    bin: int


class QualityScorer(TransformerMixin, BaseEstimator):
    """Corpus-normalized quality ensemble.

    ``fit`` records per-proxy ``(s_min, s_max)`` over a reference corpus;
    ``transform`` maps images to normalized proxy scores (``N×3``).
    """

    def fit(self, X, y=None):
        raw = raw_scores(_check_images(X))
        if raw.shape[0] == 0:
            raise ValueError("cannot fit on an empty corpus")
        self.s_min_ = raw.min(axis=0)
        self.s_max_ = raw.max(axis=0)
        return self

    def transform(self, X):
        check_is_fitted(self, "s_min_")
        return normalize(raw_scores(_check_images(X)), self.s_min_, self.s_max_)

    def score_samples(self, X) -> np.ndarray:
        """Ensemble score ``S`` per image."""
        return np.atleast_1d(ensemble(self.transform(X)))

    def bins(self, X) -> np.ndarray:
        return np.atleast_1d(bin_score(self.score_samples(X)))

    def reports(self, X) -> list[QualityReport]:
        X = _check_images(X)
        raw = raw_scores(X)
        norm = normalize(raw, self.s_min_, self.s_max_)
        out = []
        for r, nrm in zip(raw, norm):
            s = ensemble(nrm)
            out.append(QualityReport(tuple(map(float, r)), tuple(map(float, nrm)), s, bin_score(s)))
        return out

    def ensemble_tensor(self, images) -> Tensor:
        """Differentiable per-image ensemble score of an image batch."""
        check_is_fitted(self, "s_min_")
        norm = normalize(proxy_scores(images), self.s_min_, self.s_max_)
        return T.mean(norm, axis=1)


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :, None]
    elif X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected image batch of shape N×H×W[×C], got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X
