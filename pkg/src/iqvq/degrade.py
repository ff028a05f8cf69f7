"""Synthetic LQ generation: blur -> downsample -> noise -> JPEG -> upsample."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dctn, idctn
from sklearn.base import BaseEstimator, TransformerMixin

# standard JPEG luminance quantization table (Annex K)
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

SIGMA_RANGE = (1.0, 4.0)
R_RANGE = (1, 4)
DELTA_RANGE = (0.0, 20.0)
Q_RANGE = (30, 90)


@dataclass(frozen=True)
class DegradationParams:
    sigma: float
    r: int
    delta: float
    q: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 1 <= self.q <= 100:
            raise ValueError("q must lie in [1, 100]")

    def as_dict(self) -> dict:
        return asdict(self)


def sample_params(rng: np.random.Generator, image_size: int = 32) -> DegradationParams:
    """Draw sigma/delta as uniform reals and r/q as uniform integers.

    ``r`` is restricted to factors that keep ``image_size / r`` a multiple of 8
    where possible so the JPEG stage sees whole blocks.
    """
    sigma = rng.uniform(*SIGMA_RANGE)
    factors = [r for r in range(R_RANGE[0], R_RANGE[1] + 1) if image_size % (8 * r) == 0]
    r = int(rng.choice(factors))
    delta = rng.uniform(*DELTA_RANGE)
    q = int(rng.integers(Q_RANGE[0], Q_RANGE[1] + 1))
    return DegradationParams(float(sigma), r, float(delta), q)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D sampled Gaussian of radius ``ceil(3·sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):
        # divide first so tiny sigma gives a unit impulse instead of 0/0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _spatial(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected H×W or H×W×C image, got shape {img.shape}")
    return img


def gaussian_blur(image, sigma: float) -> np.ndarray:
    img = _spatial(image)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    rad = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (rad, rad)
        # reflect padding needs rad < extent; fold the kernel back for very wide kernels
        mode = "reflect" if rad < img.shape[axis] else "symmetric"
        p = np.pad(out, pad, mode=mode)
        win = np.lib.stride_tricks.sliding_window_view(p, len(k), axis=axis)
        out = win @ k
    return out


def resample_down(image, r: int) -> np.ndarray:
    img = _spatial(image)
    if r < 1:
        raise ValueError("r must be >= 1")
    h, w = img.shape[:2]
    if h % r or w % r:
        raise ValueError(f"extents {h}x{w} not divisible by r={r}")
    if r == 1:
        return img.copy()
    blocks = img.reshape(h // r, r, w // r, r, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def resample_up(image, r: int) -> np.ndarray:
    img = _spatial(image)
    if r < 1:
        raise ValueError("r must be >= 1")
    return np.repeat(np.repeat(img, r, axis=0), r, axis=1)


def add_noise(image, delta: float, seed) -> np.ndarray:
    """Add N(0, (delta/255)²) noise then clamp to [0, 1]."""
    img = _spatial(image)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return img.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, delta / 255.0, size=img.shape), 0.0, 1.0)


def quant_table(q: int) -> np.ndarray:
    if not 1 <= q <= 100:
        raise ValueError("q must lie in [1, 100]")
    s = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.maximum(np.floor((JPEG_LUMA * s + 50.0) / 100.0), 1.0)


def jpeg_roundtrip(image, q: int) -> np.ndarray:
    """Grayscale 8×8 DCT quantize/dequantize round trip, no entropy coding."""
    img = _spatial(image)
    squeeze = img.ndim == 3
    if squeeze:
        if img.shape[2] != 1:
            raise ValueError("jpeg_roundtrip expects a single-channel image")
        img = img[..., 0]
    h, w = img.shape
    if h % 8 or w % 8:
        raise ValueError(f"extents {h}x{w} not divisible by 8")
    table = quant_table(q)
    blocks = (img * 255.0 - 128.0).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, type=2, axes=(2, 3), norm="ortho")
    out = rec.transpose(0, 2, 1, 3).reshape(h, w)
    out = np.clip((out + 128.0) / 255.0, 0.0, 1.0)
    return out[..., None] if squeeze else out


def degrade(image, params: DegradationParams, seed) -> np.ndarray:
    img = _spatial(image)
    h, w = img.shape[:2]
    step = math.lcm(params.r, 8)
    if h != w or h % step:
        raise ValueError(f"image must be square with extents divisible by {step}, got {h}x{w}")
    x = gaussian_blur(img, params.sigma)
    x = resample_down(x, params.r)
    x = add_noise(x, params.delta, seed)
    x = jpeg_roundtrip(x, params.q)
    return resample_up(x, params.r)


class Degrader(TransformerMixin, BaseEstimator):
    """Apply the degradation pipeline to an ``N×H×W`` batch with per-image
    params drawn from the desk-scale ranges. Image ``i`` uses seed
    ``random_state + i`` for its parameters and, separately, for its noise,
    so ``degrade(x_i, params_i, seed_i)`` reproduces a row exactly."""

    def __init__(self, random_state: int = 0):
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def sample(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError("expected an N×H×W batch")
        out, params, seeds = [], [], []
        for i, img in enumerate(X):
            seed = int(self.random_state) + i
            p = sample_params(np.random.default_rng([1, seed]), img.shape[0])
            out.append(degrade(img, p, seed))
            params.append(p)
            seeds.append(seed)
        return np.stack(out), params, seeds

    def transform(self, X):
        return self.sample(X)[0]
