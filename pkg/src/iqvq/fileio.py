"""Plain PGM images, CSV tables, and the key=value run configuration."""

from __future__ import annotations

import csv
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from .corpus import CorpusSpec
from .experiments import PAIR_SEED
from .train import Stage1Config, Stage2Config

PGM_MAXVAL = 255


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- PGM


def write_pgm(path, image) -> Path:
    """Write a ``H×W`` (or ``H×W×1``) image in ``[0, 1]`` as plain ``P2``."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    q = np.rint(np.clip(a, 0.0, 1.0) * PGM_MAXVAL).astype(np.int64)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    lines += [" ".join(map(str, row)) for row in q]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_pgm(path) -> np.ndarray:
    """Read a plain ``P2`` file into a float ``H×W`` array in ``[0, 1]``."""
    text = Path(path).read_text(encoding="ascii")
    tokens = []
    for line in text.splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM (P2) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except (IndexError, ValueError) as e:
        raise ValueError(f"{path}: malformed PGM header or data") from e
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid PGM extents or maxval")
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, found {vals.size}")
    if vals.min() < 0 or vals.max() > maxval:
        raise ValueError(f"{path}: sample outside [0, {maxval}]")
    return vals.reshape(h, w).astype(np.float64) / maxval


def read_pgm_dir(directory, pattern: str = "*.pgm") -> tuple[list[str], np.ndarray]:
    """All images in ``directory`` sorted by name, as ``(ids, N×H×W)``."""
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no {pattern} files in {directory}")
    return [p.stem for p in paths], np.stack([read_pgm(p) for p in paths])


# ---------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: list[dict], columns=None) -> Path:
    if columns is None:
        columns = list(rows[0]) if rows else []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- run configuration

# general keys: name -> (type, default, help)
GENERAL_KEYS: dict[str, tuple[type, object, str]] = {
    "seed": (int, 7, "master seed used by ablate for corpus and training"),
    "pairs.seed": (int, PAIR_SEED, "LQ synthesis seed (pair i uses seed + i)"),
    "bin": (int, 9, "conditioning bin used at inference"),
    "eval.count": (int, 64, "size of the seeded evaluation set"),
    "overopt.count": (int, 16, "inputs for the over-optimization experiment"),
    "overopt.steps": (int, 200, "continuous ascent steps"),
    "overopt.sweeps": (int, 50, "maximum discrete coordinate-ascent sweeps"),
    "overopt.step_size": (float, 0.1, "initial backtracking step for continuous ascent"),
    "degrade.sigma": (float, None, "fixed blur sigma for gen-pairs (unset: sampled in [1, 4])"),
    "degrade.r": (int, None, "fixed resampling factor (unset: sampled from {1, 2, 4})"),
    "degrade.delta": (float, None, "fixed noise level on the 0-255 scale (unset: sampled in [0, 20])"),
    "degrade.q": (int, None, "fixed JPEG quality (unset: sampled in [30, 90])"),
}

SECTIONS = {"corpus": CorpusSpec, "stage1": Stage1Config, "stage2": Stage2Config}


def _type_of(cls, name: str) -> type:
    t = {f.name: f.type for f in fields(cls)}[name]
    t = t if isinstance(t, str) else t.__name__
    return {"int": int, "float": float, "bool": bool, "str": str}[t]


def config_keys() -> dict[str, tuple[type, object, str]]:
    """Every accepted key with its type, default and description."""
    out = dict(GENERAL_KEYS)
    for section, cls in SECTIONS.items():
        default = cls()
        for f in fields(cls):
            out[f"{section}.{f.name}"] = (_type_of(cls, f.name), getattr(default, f.name), "")
    return out


def _coerce(key: str, typ: type, raw: str):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    keys = config_keys()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in keys:
            raise ConfigError(f"{source}:{n}: unknown key {k!r}")
        out[k] = _coerce(k, keys[k][0], v)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def apply_overrides(cfg: dict, pairs) -> dict:
    """Merge ``key=value`` strings (e.g. from ``--set``) into ``cfg``."""
    return {**cfg, **parse_config("\n".join(pairs), "--set")}


def resolve(cfg: dict) -> dict:
    """Full key map with defaults filled in."""
    return {k: cfg.get(k, d) for k, (_, d, _) in config_keys().items()}


def section(cfg: dict, name: str):
    cls = SECTIONS[name]
    full = resolve(cfg)
    return cls(**{f.name: full[f"{name}.{f.name}"] for f in fields(cls)})


def dump_config(cfg: dict) -> str:
    lines = []
    for k, v in resolve(cfg).items():
        lines.append(f"{k} = {v}" if v is not None else f"# {k} = (unset)")
    return "\n".join(lines) + "\n"
