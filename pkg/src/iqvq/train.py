"""Stage-I dual-codebook autoencoder training, stage-II conditioned code
prediction, and restoration inference."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import models as M
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .quality import QualityScorer, bin_score
from .tensor import Tensor
from .vq import COMMON, HQ_PLUS, Codebook, codebook_loss, fuse, quantize

log = logging.getLogger(__name__)

UNCONDITIONED_BIN = 5


class TrainingError(RuntimeError):
    pass


@dataclass
class Stage1Config:
    lr: float = 0.5
    disc_lr: float = 0.05
    steps: int = 2000
    batch_size: int = 8
    alpha: float = 1.0
    beta: float = 0.25
    s_thr: float = 0.90
    adv_weight: float = 0.05
    per_weight: float = 0.1
    adv_warmup: float = 0.25
    n_common: int = 64
    n_hq: int = 32
    feat_reduction: str = "mean"
    seed: int = 7
    log_every: int = 50


@dataclass
class Stage2Config:
    lr: float = 0.1
    steps: int = 2000
    batch_size: int = 8
    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: float = 1.0
    seed: int = 7
    init_from_stage1: bool = True
    condition: bool = True
    defer_quality: bool = False
    log_every: int = 50


def config_from_dict(cls, d: dict):
    known = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in d.items():
        if k not in known:
            raise KeyError(f"unknown {cls.__name__} key {k!r}")
        out[k] = v
    return cls(**out)


def config_metadata(stage: int, cfg, **extra) -> dict:
    """Checkpoint metadata: stage marker plus the config echoed under ``s<stage>.``."""
    m = {"stage": str(stage)}
    m.update({f"s{stage}.{k}": str(v) for k, v in asdict(cfg).items()})
    m.update({k: str(v) for k, v in extra.items()})
    return m


def _sgd(params, lr: float):
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


def _as_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[1:] != (M.IMAGE_SIZE, M.IMAGE_SIZE, 1):
        raise ValueError(f"expected N×32×32[×1] images, got {X.shape}")
    return X


def _batches(rng: np.random.Generator, n: int, batch: int, steps: int):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + batch]
        pos += batch


# ---------------------------------------------------------------- stage I


@dataclass
class Stage1Model:
    params: dict[str, Tensor]
    common: Codebook
    hq: Codebook | None
    scorer: QualityScorer
    cfg: Stage1Config

    @classmethod
    def init(cls, cfg: Stage1Config, scorer: QualityScorer) -> "Stage1Model":
        rng = np.random.default_rng(cfg.seed)
        params = {}
        params.update(M.init_encoder(rng))
        params.update(M.init_decoder(rng))
        params.update(M.init_discriminator(rng))
        common = Codebook.init(cfg.n_common, M.LATENT_DIM, rng, COMMON)
        hq = Codebook.init(cfg.n_hq, M.LATENT_DIM, rng, HQ_PLUS) if cfg.n_hq else None
        return cls(params, common, hq, scorer, cfg)

    def generator_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith(("enc.", "dec.")) and t.requires_grad]

    def codebook_params(self) -> list[Tensor]:
        return [self.common.entries] + ([] if self.hq is None else [self.hq.entries])

    def disc_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("disc.")]

    def checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        ck = Checkpoint.from_params(self.params, {**config_metadata(1, self.cfg), **(metadata or {})})
        ck.tensors["cb.common"] = self.common.entries.data.copy()
        if self.hq is not None:
            ck.tensors["cb.hq"] = self.hq.entries.data.copy()
        ck.tensors["quality.s_min"] = np.asarray(self.scorer.s_min_, dtype=np.float64).copy()
        ck.tensors["quality.s_max"] = np.asarray(self.scorer.s_max_, dtype=np.float64).copy()
        return ck


def scorer_from_checkpoint(ck: Checkpoint) -> QualityScorer:
    if "quality.s_min" not in ck.tensors:
        raise CheckpointError("checkpoint has no quality normalizer")
    qs = QualityScorer()
    qs.s_min_ = ck.tensors["quality.s_min"].copy()
    qs.s_max_ = ck.tensors["quality.s_max"].copy()
    return qs


def codebooks_from_checkpoint(ck: Checkpoint, trainable: bool = False) -> tuple[Codebook, Codebook | None]:
    if "cb.common" not in ck.tensors:
        raise CheckpointError("checkpoint has no codebooks")
    common = Codebook(Tensor(ck.tensors["cb.common"].copy(), requires_grad=trainable), COMMON)
    hq = None
    if "cb.hq" in ck.tensors:
        hq = Codebook(Tensor(ck.tensors["cb.hq"].copy(), requires_grad=trainable), HQ_PLUS)
    return common, hq


def stage1_model_from_checkpoint(ck: Checkpoint) -> Stage1Model:
    cfg = config_from_dict(Stage1Config, _cfg_echo(ck, Stage1Config, "s1."))
    params = {k: v for k, v in ck.params().items() if k.startswith(("enc.", "dec.", "disc."))}
    common, hq = codebooks_from_checkpoint(ck, trainable=True)
    return Stage1Model(params, common, hq, scorer_from_checkpoint(ck), cfg)


def _cfg_echo(ck: Checkpoint, cls, prefix: str) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in ck.metadata.items():
        name = k[len(prefix):]
        if k.startswith(prefix) and name in types:
            out[name] = _parse_value(v, types[name])
    return out


def _parse_value(v: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        return v in ("True", "true", "1")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


def stage1_forward(model: Stage1Model, x: np.ndarray, s: np.ndarray, use_adv: bool = True, frozen=None) -> dict:
    """Generator-side stage-I loss terms for a batch.

    ``frozen`` (a dict from a previous call's ``"freeze"`` entry) pins the
    code indices, the straight-through offset and the stop-gradient operands
    of the codebook loss; used to build a surrogate
    whose finite differences match the straight-through gradient.
    """
    cfg = model.cfg
    xt = Tensor(x)
    zh = M.encode(xt, model.params)
    if frozen is None:
        zq1, c1 = quantize(zh, model.common)
    else:
        c1 = frozen["c1"]
        zq1 = model.common.lookup(c1)
    c2 = None
    zq = zq1
    if model.hq is not None:
        if frozen is None:
            zq2, c2 = quantize(zh, model.hq)
        else:
            c2 = frozen["c2"]
            zq2 = model.hq.lookup(c2)
        zq = fuse(zq1, zq2, s, cfg.s_thr, cfg.alpha)
    anchors = None if frozen is None else (frozen["zh"], frozen["zq"])
    feat = codebook_loss(zh, zq, cfg.beta, reduction=cfg.feat_reduction, anchors=anchors)
    if frozen is None:
        dec_in = T.straight_through(zh, zq)
    else:
        dec_in = zh + Tensor(frozen["offset"])
    x_rec = M.decode(dec_in, model.params)
    l1 = T.mean(T.abs(x_rec - xt))
    per = M.perceptual_loss(x_rec, xt)
    total = l1 + cfg.per_weight * per + feat
    adv = None
    if use_adv:
        adv = M.generator_adv_loss(M.discriminate(x_rec, model.params))
        total = total + cfg.adv_weight * adv
    return {
        "total": total,
        "l1": l1,
        "per": per,
        "feat": feat,
        "adv": adv,
        "x_rec": x_rec,
        "c1": c1,
        "c2": c2,
        "freeze": {"c1": c1, "c2": c2, "offset": zq.data - zh.data, "zh": zh.data.copy(), "zq": zq.data.copy()},
    }


def stage1_disc_loss(model: Stage1Model, x: np.ndarray, x_rec: np.ndarray) -> Tensor:
    real = M.discriminate(Tensor(x), model.params)
    fake = M.discriminate(Tensor(x_rec), model.params)
    return M.discriminator_loss(real, fake)


def stage1_step(model: Stage1Model, x: np.ndarray, s: np.ndarray, use_adv: bool) -> dict:
    cfg = model.cfg
    out = stage1_forward(model, x, s, use_adv)
    total = out["total"]
    if not np.isfinite(total.data):
        raise TrainingError("non-finite stage-I loss")
    total.backward()
    _sgd(model.generator_params(), cfg.lr)
    _sgd(model.codebook_params(), cfg.lr)
    for p in model.disc_params():
        p.grad = None
    row = {k: float(out[k].data) for k in ("total", "l1", "per", "feat")}
    row["adv"] = float(out["adv"].data) if out["adv"] is not None else float("nan")
    row["disc"] = float("nan")
    if use_adv:
        d = stage1_disc_loss(model, x, out["x_rec"].data)
        d.backward()
        _sgd(model.disc_params(), cfg.disc_lr)
        row["disc"] = float(d.data)
    return row


def reconstruct(model: Stage1Model, X, s=None) -> np.ndarray:
    """Stage-I reconstruction with score routing (``s`` defaults to the scorer's ensemble)."""
    X = _as_images(X)
    if s is None:
        s = model.scorer.score_samples(X)
    with T.no_grad():
        zh = M.encode(Tensor(X), model.params)
        zq, _ = quantize(zh, model.common)
        if model.hq is not None:
            zq = fuse(zq, quantize(zh, model.hq)[0], np.asarray(s), model.cfg.s_thr, model.cfg.alpha)
        return M.decode(zq, model.params).data


def recon_l1(model: Stage1Model, X, s=None) -> float:
    X = _as_images(X)
    return float(np.abs(reconstruct(model, X, s) - X).mean())


def train_stage1(
    X,
    cfg: Stage1Config | None = None,
    scores=None,
    scorer: QualityScorer | None = None,
    holdout=None,
    model: Stage1Model | None = None,
) -> tuple[Stage1Model, list[dict]]:
    """Train the stage-I autoencoder on HQ images ``X``.

    ``scores`` are the per-image ensemble scores; when omitted they come from
    ``scorer`` (fitted on ``X`` if not given). Returns the model and one history
    row per logged step (plus held-out L1 when ``holdout`` is given).
    """
    cfg = cfg or Stage1Config()
    X = _as_images(X)
    if scorer is None:
        scorer = QualityScorer().fit(X)
    s = scorer.score_samples(X) if scores is None else np.asarray(scores, dtype=np.float64)
    if s.shape != (X.shape[0],):
        raise ValueError("need one score per image")
    above = int((s > cfg.s_thr).sum())
    if cfg.n_hq and (above == 0 or above == len(s)):
        warnings.warn("all scores fall on one side of s_thr; the dual codebook degenerates", stacklevel=2)
    model = model or Stage1Model.init(cfg, scorer)
    rng = np.random.default_rng(cfg.seed + 1)
    hold_s = None if holdout is None else scorer.score_samples(_as_images(holdout))
    warm = int(cfg.adv_warmup * cfg.steps)
    history = []
    for step, idx in enumerate(_batches(rng, X.shape[0], cfg.batch_size, cfg.steps)):
        log_now = step % cfg.log_every == 0
        row = {"step": step}
        if holdout is not None and log_now:
            row["holdout_l1"] = recon_l1(model, holdout, hold_s)
        try:
            row.update(stage1_step(model, X[idx], s[idx], use_adv=cfg.adv_weight > 0 and step >= warm))
        except TrainingError as e:
            raise TrainingError(f"{e} at step {step}") from None
        if log_now:
            history.append(row)
            log.info("stage1 step %d l1=%.4f", step, row["l1"])
    final = {"step": cfg.steps}
    if holdout is not None:
        final["holdout_l1"] = recon_l1(model, holdout, hold_s)
    history.append(final)
    return model, history


# ---------------------------------------------------------------- stage II


@dataclass
class Stage2Model:
    enc: dict[str, Tensor]  # trainable LQ encoder (enc.* keys)
    emb: dict[str, Tensor]
    tf: dict[str, Tensor]
    frozen_enc: dict[str, Tensor]
    dec: dict[str, Tensor]
    common: Codebook
    hq: Codebook | None
    scorer: QualityScorer
    cfg: Stage2Config
    alpha: float = 1.0

    def trainable(self) -> list[Tensor]:
        return M.trainable(self.enc) + M.trainable(self.emb) + M.trainable(self.tf)

    def checkpoint(self, base: Checkpoint, metadata: dict | None = None) -> Checkpoint:
        ck = Checkpoint(dict(base.tensors), dict(base.metadata))
        ck.metadata.update(config_metadata(2, self.cfg))
        ck.metadata.update({k: str(v) for k, v in (metadata or {}).items()})
        ck.add(self.enc, "lq.")
        ck.add(self.emb)
        ck.add(self.tf)
        return ck


def stage2_model_from_checkpoint(base: Checkpoint, cfg: Stage2Config | None = None) -> Stage2Model:
    """Build a stage-II model; reuses stage-II weights if ``base`` already has them."""
    if cfg is None:
        cfg = config_from_dict(Stage2Config, _cfg_echo(base, Stage2Config, "s2."))
    alpha = cfg.alpha
    frozen_enc = {k: v for k, v in base.params(trainable=False).items() if k.startswith("enc.")}
    dec = {k: v for k, v in base.params(trainable=False).items() if k.startswith("dec.")}
    common, hq = codebooks_from_checkpoint(base)
    scorer = scorer_from_checkpoint(base)
    rng = np.random.default_rng(cfg.seed + 100)
    if base.has("lq.enc."):
        enc = base.params("lq.")
    elif cfg.init_from_stage1:
        enc = base.params(trainable=True)
        enc = {k: v for k, v in enc.items() if k.startswith("enc.")}
    else:
        enc = M.init_encoder(rng)
    emb = {k: v for k, v in base.params().items() if k.startswith("emb.")} or M.init_score_embedding(rng)
    tf = {k: v for k, v in base.params().items() if k.startswith("tf.")}
    if not tf:
        tf = M.init_transformer(rng, common.size, hq.size if hq is not None else None)
    tf["tf.heads"].requires_grad = False
    return Stage2Model(enc, emb, tf, frozen_enc, dec, common, hq, scorer, cfg, alpha)


def stage2_targets(model: Stage2Model, X_hq) -> dict:
    """Frozen-encoder code targets and fused HQ latent (always-add fusion)."""
    X_hq = _as_images(X_hq)
    with T.no_grad():
        zh = M.encode(Tensor(X_hq), model.frozen_enc)
        zq1, c1 = quantize(zh, model.common)
        c2 = None
        zq = zq1
        if model.hq is not None:
            zq2, c2 = quantize(zh, model.hq)
            zq = fuse(zq1, zq2, None, alpha=model.alpha)
    n = X_hq.shape[0]
    return {
        "c1": c1.reshape(n, M.N_TOKENS),
        "c2": None if c2 is None else c2.reshape(n, M.N_TOKENS),
        "zq": zq.data,
    }


def condition_bins(model: Stage2Model, s) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if not model.cfg.condition:
        return np.full(s.shape, UNCONDITIONED_BIN, dtype=np.int64)
    return np.atleast_1d(bin_score(s))


def _soft_hard(logits: Tensor, codebook: Codebook, codes=None) -> tuple[Tensor, np.ndarray]:
    # forward: hard argmax entry; backward: through the softmax-weighted expectation
    hard_codes = np.argmax(logits.data, axis=1) if codes is None else codes
    soft = T.matmul(T.softmax(logits, axis=-1), T.stop_gradient(codebook.entries))
    hard = Tensor(codebook.entries.data[hard_codes])
    return T.straight_through(soft, hard), hard_codes


def stage2_forward(model: Stage2Model, x_lq: np.ndarray, targets: dict, bins: np.ndarray, frozen=None) -> dict:
    """Stage-II loss terms. ``frozen`` pins argmax codes and the straight-through
    offset of the quality branch (gradient-check surrogate)."""
    cfg = model.cfg
    n = x_lq.shape[0]
    zl = M.encode(Tensor(x_lq), model.enc)
    feat = T.mean(T.square(zl - Tensor(targets["zq"])))
    z_hat = zl + M.embed_score(bins, model.emb)
    logits1, logits2 = M.predict_codes(z_hat, model.tf)
    index = T.softmax_cross_entropy(logits1, targets["c1"].reshape(-1))
    if logits2 is not None:
        index = index + T.softmax_cross_entropy(logits2, targets["c2"].reshape(-1))
    out = {"feat": feat, "index": index, "logits1": logits1, "logits2": logits2}
    total = feat + cfg.lambda1 * index
    quality = None
    freeze = {}
    if cfg.lambda2 != 0:
        zf, freeze = _quality_latent(model, logits1, logits2, n, frozen)
        x_res = M.decode(zf, model.dec)
        quality = -1.0 * T.mean(model.scorer.ensemble_tensor(x_res))
        total = total + cfg.lambda2 * quality
        out["x_res"] = x_res
    out["quality"] = quality
    out["total"] = total
    out["freeze"] = freeze
    return out


def _quality_latent(model: Stage2Model, logits1, logits2, n, frozen):
    shape = (n, M.LATENT_GRID, M.LATENT_GRID, M.LATENT_DIM)
    if frozen is None:
        z1, h1 = _soft_hard(logits1, model.common)
        zf = z1
        h2 = None
        if logits2 is not None:
            z2, h2 = _soft_hard(logits2, model.hq)
            zf = fuse(z1, z2, None, alpha=model.alpha)
        # offset between hard forward value and soft backward path
        soft = T.matmul(T.softmax(logits1, -1), T.stop_gradient(model.common.entries)).data
        if logits2 is not None:
            soft = soft + model.alpha * (T.softmax(logits2, -1).data @ model.hq.entries.data)
        freeze = {"offset": zf.data - soft}
        return T.reshape(zf, shape), freeze
    soft = T.matmul(T.softmax(logits1, -1), T.stop_gradient(model.common.entries))
    if logits2 is not None:
        soft = soft + model.alpha * T.matmul(T.softmax(logits2, -1), T.stop_gradient(model.hq.entries))
    return T.reshape(soft + Tensor(frozen["offset"]), shape), frozen


def stage2_loss_weighted(out: dict, cfg: Stage2Config, lambda2: float | None = None) -> float:
    """Recombine the recorded terms (used to check the loss composition)."""
    l2 = cfg.lambda2 if lambda2 is None else lambda2
    q = 0.0 if out["quality"] is None else float(out["quality"].data)
    return float(out["feat"].data) + cfg.lambda1 * float(out["index"].data) + l2 * q


def train_stage2(
    X_lq,
    X_hq,
    base: Checkpoint,
    cfg: Stage2Config | None = None,
    scores=None,
) -> tuple[Stage2Model, list[dict]]:
    """Train encoder, score embedding and transformer on LQ/HQ pairs.

    Codebooks and decoder stay frozen. ``scores`` are the HQ ensemble scores
    (computed with the stage-I normalizer when omitted).
    """
    cfg = cfg or Stage2Config()
    X_lq, X_hq = _as_images(X_lq), _as_images(X_hq)
    if X_lq.shape != X_hq.shape:
        raise ValueError("LQ and HQ batches must have the same shape")
    model = stage2_model_from_checkpoint(base, cfg)
    s = model.scorer.score_samples(X_hq) if scores is None else np.asarray(scores, dtype=np.float64)
    bins = condition_bins(model, s)
    targets = stage2_targets(model, X_hq)
    rng = np.random.default_rng(cfg.seed + 2)
    params = model.trainable()
    q_start = int(0.75 * cfg.steps) if cfg.defer_quality else 0
    base_l2 = cfg.lambda2
    history = []
    for step, idx in enumerate(_batches(rng, X_lq.shape[0], cfg.batch_size, cfg.steps)):
        cfg.lambda2 = base_l2 if step >= q_start else 0.0
        try:
            out = stage2_forward(model, X_lq[idx], _take(targets, idx), bins[idx])
        finally:
            cfg.lambda2 = base_l2
        total = out["total"]
        if not np.isfinite(total.data):
            raise TrainingError(f"non-finite stage-II loss at step {step}")
        total.backward()
        _sgd(params, cfg.lr)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            acc = float((np.argmax(out["logits1"].data, 1) == targets["c1"][idx].reshape(-1)).mean())
            history.append(
                {
                    "step": step,
                    "total": float(total.data),
                    "feat": float(out["feat"].data),
                    "index": float(out["index"].data),
                    "quality": float("nan") if out["quality"] is None else float(out["quality"].data),
                    "acc1": acc,
                }
            )
            log.info("stage2 step %d total=%.4f acc1=%.3f", step, float(total.data), acc)
    return model, history


def _take(targets: dict, idx) -> dict:
    return {k: (None if v is None else v[idx]) for k, v in targets.items()}


# ---------------------------------------------------------------- inference


def require_stage2(ck: Checkpoint):
    if not (ck.has("lq.enc.") and ck.has("tf.") and ck.has("emb.")):
        raise CheckpointError("checkpoint lacks stage-II weights")


def predict_codes_for(model: Stage2Model, X_lq, bins) -> tuple[np.ndarray, np.ndarray | None]:
    X_lq = _as_images(X_lq)
    n = X_lq.shape[0]
    bins = np.broadcast_to(np.asarray(bins, dtype=np.int64), (n,))
    if not model.cfg.condition:
        bins = np.full(n, UNCONDITIONED_BIN, dtype=np.int64)
    with T.no_grad():
        zl = M.encode(Tensor(X_lq), model.enc)
        l1, l2 = M.predict_codes(zl + M.embed_score(bins, model.emb), model.tf)
    c1 = np.argmax(l1.data, axis=1).reshape(n, M.N_TOKENS)
    c2 = None if l2 is None else np.argmax(l2.data, axis=1).reshape(n, M.N_TOKENS)
    return c1, c2


def fused_latent(model: Stage2Model, c1: np.ndarray, c2: np.ndarray | None) -> np.ndarray:
    n = c1.shape[0]
    z = model.common.entries.data[c1]
    if c2 is not None:
        z = z + model.alpha * model.hq.entries.data[c2]
    return z.reshape(n, M.LATENT_GRID, M.LATENT_GRID, M.LATENT_DIM)


def decode_latent(model: Stage2Model, z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return M.decode(Tensor(z), model.dec).data


def restore_batch(model: Stage2Model, X_lq, bin: int = 9) -> np.ndarray:
    if not 0 <= int(bin) <= 9:
        raise ValueError("bin must lie in [0, 9]")
    c1, c2 = predict_codes_for(model, X_lq, bin)
    return decode_latent(model, fused_latent(model, c1, c2))


def restore(x_lq, bin: int, ck: Checkpoint) -> np.ndarray:
    """Restore one ``32×32[×1]`` LQ image (or a batch) at conditioning ``bin``."""
    require_stage2(ck)
    model = stage2_model_from_checkpoint(ck)
    x = np.asarray(x_lq, dtype=np.float64)
    single = x.ndim == 2 or (x.ndim == 3 and x.shape[-1] == 1 and x.shape[0] == M.IMAGE_SIZE)
    out = restore_batch(model, x[None] if single else x, bin)
    return out[0] if single else out
