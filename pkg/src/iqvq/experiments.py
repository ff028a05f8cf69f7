"""Quality optimization in the continuous and discrete latent spaces,
per-bin evaluation, and the four-row ablation grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import models as M
from . import tensor as T
from .corpus import CorpusSpec, gen_corpus
from .degrade import Degrader
from .quality import dog_energy, raw_scores
from .tensor import NumericalError, Tensor
from .train import (
    Stage1Config,
    Stage2Config,
    Stage2Model,
    _as_images,
    condition_bins,
    decode_latent,
    fused_latent,
    predict_codes_for,
    stage2_targets,
    train_stage1,
    train_stage2,
)
from .vq import utilization

log = logging.getLogger(__name__)

LINE_SEARCH_START = 0.1
LINE_SEARCH_MIN = 1e-6

# disjoint seed ranges for the stage-I holdout set, the eval set, and LQ synthesis
HOLDOUT_SEED = 100_000
EVAL_SEED = 200_000
PAIR_SEED = 1_000_000


def make_pairs(X_h, seed: int = PAIR_SEED) -> np.ndarray:
    """LQ counterparts of an ``N×32×32`` HQ batch."""
    return Degrader(random_state=seed).transform(np.asarray(X_h, dtype=np.float64))


def holdout_set(count: int = 64) -> np.ndarray:
    return gen_corpus(CorpusSpec(count=count, seed=HOLDOUT_SEED))[0]


def eval_set(count: int = 64, seed: int = EVAL_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Seeded HQ images and their LQ counterparts, disjoint from training seeds."""
    E_h = gen_corpus(CorpusSpec(count=count, seed=seed))[0]
    return E_h, make_pairs(E_h, PAIR_SEED + seed)


@dataclass
class OptimizationResult:
    image: np.ndarray  # 32×32×1
    train_trace: list[float]  # ensemble score per step (step 0 = plain restore)
    holdout_trace: list[float]  # held-out DoG energy per step
    latent: np.ndarray | None = None
    codes: tuple[np.ndarray, np.ndarray | None] | None = None


def _holdout(images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return np.atleast_1d(dog_energy(images).data)


def _ensemble(model: Stage2Model, images: np.ndarray) -> np.ndarray:
    return model.scorer.score_samples(images)


def _single(x_l) -> np.ndarray:
    x = _as_images(np.asarray(x_l, dtype=np.float64).reshape(1, M.IMAGE_SIZE, M.IMAGE_SIZE, 1))
    return x


def optimize_quality_continuous(
    x_l, model: Stage2Model, steps: int = 200, step_size: float = LINE_SEARCH_START, bin: int = 9
) -> OptimizationResult:
    """Gradient ascent on the decoded ensemble score directly in the fused latent.

    Each step moves along the gradient scaled to unit max-norm, starting at
    ``step_size`` and halving until the score strictly improves; the run ends
    early once the step falls below ``1e-6``.
    """
    x = _single(x_l)
    c1, c2 = predict_codes_for(model, x, bin)
    z = fused_latent(model, c1, c2)

    def value(zd, grad=False):
        zt = Tensor(zd, requires_grad=grad)
        img = M.decode(zt, model.dec)
        s = T.sum(model.scorer.ensemble_tensor(img))
        if not np.isfinite(s.data):
            raise NumericalError("non-finite ascent value")
        if grad:
            s.backward()
            return float(s.data), img.data, zt.grad
        return float(s.data), img.data, None

    with T.no_grad():
        f, img, _ = value(z)
    train = [f]
    hold = [float(_holdout(img)[0])]
    for _ in range(steps):
        f, _, g = value(z, grad=True)
        scale = np.abs(g).max()
        if not np.isfinite(scale):
            raise NumericalError("non-finite ascent gradient")
        if scale == 0:
            break
        d = g / scale
        t = step_size
        accepted = False
        with T.no_grad():
            while t >= LINE_SEARCH_MIN:
                fn, imn, _ = value(z + t * d)
                if fn > f:
                    z, img, f = z + t * d, imn, fn
                    accepted = True
                    break
                t *= 0.5
        if not accepted:
            break
        train.append(f)
        hold.append(float(_holdout(img)[0]))
    return OptimizationResult(img[0], train, hold, latent=z)


def optimize_quality_discrete(
    x_l, model: Stage2Model, steps: int = 50, bin: int = 9, codes=None
) -> OptimizationResult:
    """Greedy coordinate ascent over code indices.

    A sweep visits every position of the common code sequence and then of the
    hq-plus sequence, decodes every entry at that position and moves only on a
    strict improvement. Stops after ``steps`` sweeps or a sweep with no change.
    """
    if codes is None:
        c1, c2 = predict_codes_for(model, _single(x_l), bin)
        c1, c2 = c1[0].copy(), None if c2 is None else c2[0].copy()
    else:
        c1 = np.array(codes[0], dtype=np.int64).reshape(M.N_TOKENS)
        c2 = None if codes[1] is None else np.array(codes[1], dtype=np.int64).reshape(M.N_TOKENS)
    e1 = model.common.entries.data
    e2 = None if model.hq is None else model.hq.entries.data

    def base_latent():
        z = e1[c1]
        if c2 is not None:
            z = z + model.alpha * e2[c2]
        return z

    img = decode_latent(model, base_latent().reshape(1, M.LATENT_GRID, M.LATENT_GRID, M.LATENT_DIM))
    f = float(_ensemble(model, img)[0])
    train, hold = [f], [float(_holdout(img)[0])]
    seqs = [(c1, e1, 1.0)] + ([] if c2 is None else [(c2, e2, model.alpha)])
    for _ in range(steps):
        changed = False
        for seq, entries, weight in seqs:
            for pos in range(M.N_TOKENS):
                z = np.repeat(base_latent()[None], entries.shape[0], axis=0)
                z[:, pos] += weight * (entries - entries[seq[pos]])
                cand = decode_latent(model, z.reshape(-1, M.LATENT_GRID, M.LATENT_GRID, M.LATENT_DIM))
                scores = _ensemble(model, cand)
                k = int(np.argmax(scores))  # lowest index among equal maxima
                if scores[k] > f:
                    seq[pos] = k
                    f = float(scores[k])
                    img = cand[k : k + 1]
                    changed = True
        train.append(f)
        hold.append(float(_holdout(img)[0]))
        if not changed:
            break
    return OptimizationResult(img[0], train, hold, codes=(c1, c2))


@dataclass
class OveroptCase:
    continuous: OptimizationResult
    discrete: OptimizationResult

    @property
    def continuous_drop(self) -> float:
        return self.continuous.holdout_trace[-1] / self.continuous.holdout_trace[0]

    @property
    def discrete_drift(self) -> float:
        return abs(self.discrete.holdout_trace[-1] / self.discrete.holdout_trace[0] - 1.0)

    @property
    def contrast_holds(self) -> bool:
        return self.continuous_drop < 0.9 and self.discrete_drift <= 0.1


def overopt_experiment(
    X_l, model: Stage2Model, steps: int = 200, sweeps: int = 50, bin: int = 9
) -> list[OveroptCase]:
    """Run both optimizers from the same restore on every input."""
    return [
        OveroptCase(
            optimize_quality_continuous(x, model, steps, bin=bin),
            optimize_quality_discrete(x, model, sweeps, bin=bin),
        )
        for x in _as_images(X_l)
    ]


def overopt_rows(cases: list[OveroptCase]) -> list[dict]:
    """Paired long-format trace rows; a finished run repeats its last value."""
    rows = []
    for i, c in enumerate(cases):
        ct, ch = c.continuous.train_trace, c.continuous.holdout_trace
        dt, dh = c.discrete.train_trace, c.discrete.holdout_trace
        for step in range(max(len(ct), len(dt))):
            rows.append(
                {
                    "input": i,
                    "step": step,
                    "continuous_train": ct[min(step, len(ct) - 1)],
                    "continuous_holdout": ch[min(step, len(ch) - 1)],
                    "discrete_train": dt[min(step, len(dt) - 1)],
                    "discrete_holdout": dh[min(step, len(dh) - 1)],
                }
            )
    return rows


# ---------------------------------------------------------------- evaluation

EVAL_COLUMNS = (
    "bin",
    "sharpness_mean",
    "sharpness_std",
    "contrast_mean",
    "contrast_std",
    "laplacian_mean",
    "laplacian_std",
    "dog_mean",
    "dog_std",
    "ensemble_mean",
    "ensemble_std",
    "l1",
    "acc_common",
    "acc_hq",
    "util_common",
    "util_hq",
)


def evaluate(X_l, X_h, model: Stage2Model, bins=range(10)) -> list[dict]:
    """Per-bin metrics of restorations of ``X_l`` against ground truth ``X_h``."""
    X_l, X_h = _as_images(X_l), _as_images(X_h)
    if X_l.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    if X_l.shape != X_h.shape:
        raise ValueError("LQ and HQ sets differ in shape")
    targets = stage2_targets(model, X_h)
    rows = []
    for b in bins:
        c1, c2 = predict_codes_for(model, X_l, int(b))
        R = decode_latent(model, fused_latent(model, c1, c2))
        raw = raw_scores(R)
        s = _ensemble(model, R)
        dog = _holdout(R)
        row = {"bin": int(b)}
        for j, name in enumerate(("sharpness", "contrast", "laplacian")):
            row[f"{name}_mean"] = float(raw[:, j].mean())
            row[f"{name}_std"] = float(raw[:, j].std())
        row.update(
            dog_mean=float(dog.mean()),
            dog_std=float(dog.std()),
            ensemble_mean=float(s.mean()),
            ensemble_std=float(s.std()),
            l1=float(np.abs(R - X_h).mean()),
            acc_common=float((c1 == targets["c1"]).mean()),
            acc_hq=float("nan") if c2 is None else float((c2 == targets["c2"]).mean()),
            util_common=utilization(c1, model.common.size),
            util_hq=float("nan") if c2 is None else utilization(c2, model.hq.size),
        )
        rows.append(row)
    return rows


# ---------------------------------------------------------------- ablation

ABLATION_ROWS = (
    ("a", "baseline", dict(condition=False, dual=False, quality=False)),
    ("b", "+condition", dict(condition=True, dual=False, quality=False)),
    ("c", "+dual codebook", dict(condition=True, dual=True, quality=False)),
    ("d", "+quality loss", dict(condition=True, dual=True, quality=True)),
)


def ablate(
    X_h,
    X_l,
    E_h,
    E_l,
    stage1: Stage1Config | None = None,
    stage2: Stage2Config | None = None,
    bases: dict | None = None,
    trained: dict | None = None,
) -> list[dict]:
    """Train the four ablation configurations and score restorations of the
    eval set ``E_l`` at bin 9 (bin 5 for the unconditioned row).

    ``bases`` may carry prebuilt stage-I checkpoints keyed ``"single"`` and
    ``"dual"``; missing ones are trained here. ``trained`` may carry stage-II
    models keyed by row tag, which must match that row's configuration.
    """
    stage1 = stage1 or Stage1Config()
    stage2 = stage2 or Stage2Config()
    bases = dict(bases or {})
    for key, n_hq in (("single", 0), ("dual", stage1.n_hq or Stage1Config().n_hq)):
        if key not in bases:
            cfg = replace(stage1, n_hq=n_hq)
            m, _ = train_stage1(X_h, cfg)
            bases[key] = m.checkpoint()
    rows = []
    for tag, label, flags in ABLATION_ROWS:
        cfg = replace(stage2, condition=flags["condition"], lambda2=stage2.lambda2 if flags["quality"] else 0.0)
        model = (trained or {}).get(tag)
        if model is None:
            model, _ = train_stage2(X_l, X_h, bases["dual" if flags["dual"] else "single"], cfg)
        elif vars(model.cfg) != vars(cfg):
            raise ValueError(f"prebuilt model for row {tag} was trained with a different configuration")
        b = 9 if flags["condition"] else condition_bins(model, [1.0])[0]
        c1, c2 = predict_codes_for(model, E_l, b)
        R = decode_latent(model, fused_latent(model, c1, c2))
        s = _ensemble(model, R)
        rows.append(
            {
                "row": tag,
                "config": label,
                "condition": int(flags["condition"]),
                "dual_codebook": int(flags["dual"]),
                "quality_loss": int(flags["quality"]),
                "ensemble_mean": float(s.mean()),
                "l1": float(np.abs(R - _as_images(E_h)).mean()),
            }
        )
        log.info("ablation %s ensemble=%.4f", tag, rows[-1]["ensemble_mean"])
    return rows


def ordering_holds(scores, tol: float = 0.0, max_ties: int = 1) -> bool:
    """``d >= c >= b >= a`` where at most ``max_ties`` adjacent pairs may
    violate the order by no more than ``tol``."""
    a = list(scores)
    ties = 0
    for lo, hi in zip(a, a[1:]):
        if hi >= lo:
            continue
        if lo - hi <= tol:
            ties += 1
        else:
            return False
    return ties <= max_ties


__all__ = [
    "OptimizationResult",
    "OveroptCase",
    "optimize_quality_continuous",
    "optimize_quality_discrete",
    "overopt_experiment",
    "overopt_rows",
    "evaluate",
    "ablate",
    "ordering_holds",
    "EVAL_COLUMNS",
    "ABLATION_ROWS",
    "make_pairs",
    "holdout_set",
    "eval_set",
]
