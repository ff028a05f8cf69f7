"""Procedural HQ corpus whose intrinsic quality varies from image to image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degrade import gaussian_blur
from .quality import raw_scores

TARGET_SHARPNESS = 0.5
TARGET_CONTRAST = 0.19
SHAPE_GAINS = np.linspace(0.0, 0.04, 41)


@dataclass(frozen=True)
class CorpusSpec:
    count: int = 512
    size: int = 32
    seed: int = 7
    # sigma_gt = 0 with probability sharp_fraction, else shift + Gamma(shape, scale)
    sharp_fraction: float = 0.12
    blur_shape: float = 1.2
    blur_scale: float = 0.4
    blur_shift: float = 0.1
    texture_period: float = 4.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.size < 16 or self.size % 2:
            raise ValueError("size must be an even number >= 16")


def sample_sigma(rng: np.random.Generator, spec: CorpusSpec) -> float:
    if rng.uniform() < spec.sharp_fraction:
        return 0.0
    return float(spec.blur_shift + rng.gamma(spec.blur_shape, spec.blur_scale))


def render(rng: np.random.Generator, size: int, period: float = 4.0) -> np.ndarray:
    """Unblurred composition: radial gradient, 1-3 ellipses, sinusoidal patch.

    The ellipse and gradient layers are rescaled so every render has the same
    sharpness and contrast proxies; blur alone then sets the quality.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    cy, cx = size / 2 + 2 * size * np.sin(ang), size / 2 + 2 * size * np.cos(ang)
    ramp = np.hypot(yy - cy, xx - cx) / size
    ramp -= ramp.mean()

    shapes = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        ey, ex = rng.uniform(0.25 * size, 0.75 * size, 2)
        ay, ax = rng.uniform(0.15 * size, 0.25 * size, 2)
        th = rng.uniform(0, np.pi)
        u = (xx - ex) * np.cos(th) + (yy - ey) * np.sin(th)
        v = -(xx - ex) * np.sin(th) + (yy - ey) * np.cos(th)
        mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        shapes = np.where(mask, rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0), shapes)
    shapes -= shapes.mean()
    gy, gx = np.gradient(shapes)
    shapes /= max(np.hypot(gx, gy).mean(), 1e-8)

    ph = pw = size // 2
    py = rng.integers(1, size - ph)
    px = rng.integers(1, size - pw)
    th = rng.choice([0.0, np.pi / 2])
    phase = np.pi / 4 + rng.integers(4) * np.pi / 2
    wave = np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / period + phase)
    texture = np.zeros((size, size))
    texture[py : py + ph, px : px + pw] = 0.2 * wave[py : py + ph, px : px + pw]

    a, b = _calibrate(shapes, ramp, texture)
    return np.clip(0.5 + a * shapes + b * ramp + texture, 0.0, 1.0)


def _calibrate(shapes, ramp, texture) -> tuple[float, float]:
    # per shape gain, solve the ramp gain for the contrast target in closed form
    # (ignoring clipping and the near-zero texture cross terms), then keep the
    # candidate closest to both targets
    vs, vr, vt = shapes.var(), ramp.var(), texture.var()
    c = (shapes * ramp).mean()
    ga = SHAPE_GAINS
    disc = (ga * c) ** 2 - vr * (ga * ga * vs + vt - TARGET_CONTRAST**2)
    gb = np.where(disc >= 0, (-ga * c + np.sqrt(np.maximum(disc, 0.0))) / vr, 0.0)
    gb = np.maximum(gb, 0.0)
    cand = 0.5 + ga[:, None, None] * shapes + gb[:, None, None] * ramp + texture
    raw = raw_scores(np.clip(cand, 0.0, 1.0)[..., None])
    err = np.abs(raw[:, 0] / TARGET_SHARPNESS - 1.0) + np.abs(raw[:, 1] / TARGET_CONTRAST - 1.0)
    k = int(np.argmin(err))
    return float(ga[k]), float(gb[k])


def gen_image(spec: CorpusSpec, index: int) -> tuple[np.ndarray, float, int]:
    seed = spec.seed + index
    rng = np.random.default_rng(seed)
    base = render(rng, spec.size, spec.texture_period)
    sigma = sample_sigma(rng, spec)
    return np.clip(gaussian_blur(base, sigma), 0.0, 1.0), sigma, seed


def gen_corpus(spec: CorpusSpec) -> tuple[np.ndarray, list[dict]]:
    """Return an ``N×size×size`` image array and manifest rows
    ``{image_id, sigma_gt, seed}``."""
    images, manifest = [], []
    for i in range(spec.count):
        img, sigma, seed = gen_image(spec, i)
        images.append(img)
        manifest.append({"image_id": f"img_{i:05d}", "sigma_gt": sigma, "seed": seed})
    return np.stack(images), manifest
