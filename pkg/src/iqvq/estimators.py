"""scikit-learn style wrappers around the two training stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import models as M
from .checkpoint import Checkpoint
from .train import (
    Stage1Config,
    Stage2Config,
    decode_latent,
    fused_latent,
    predict_codes_for,
    reconstruct,
    stage1_model_from_checkpoint,
    stage2_model_from_checkpoint,
    train_stage1,
    train_stage2,
)
from .vq import quantize
from . import tensor as T


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate an image batch (``N×32×32`` or ``N×32×32×1``, finite, in ``[0, 1]``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[1:] != (M.IMAGE_SIZE, M.IMAGE_SIZE, 1):
        raise ValueError(f"{name}: expected N×32×32[×1] images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return X


class DualCodebookVQ(TransformerMixin, BaseEstimator):
    """Stage-I autoencoder with a common and an hq-plus codebook.

    ``transform`` returns the code indices (common then hq-plus, 16 each) and
    ``inverse_transform`` decodes them with always-add fusion.
    """

    def __init__(
        self,
        n_common=64,
        n_hq=32,
        lr=0.5,
        disc_lr=0.05,
        steps=2000,
        batch_size=8,
        alpha=1.0,
        beta=0.25,
        s_thr=0.90,
        adv_weight=0.05,
        per_weight=0.1,
        random_state=7,
    ):
        self.n_common = n_common
        self.n_hq = n_hq
        self.lr = lr
        self.disc_lr = disc_lr
        self.steps = steps
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.s_thr = s_thr
        self.adv_weight = adv_weight
        self.per_weight = per_weight
        self.random_state = random_state

    def _config(self) -> Stage1Config:
        p = self.get_params(deep=False)
        seed = p.pop("random_state")
        return Stage1Config(seed=seed, **p)

    def fit(self, X, y=None, holdout=None):
        X = check_images(X)
        self.model_, self.history_ = train_stage1(X, self._config(), holdout=holdout)
        self.checkpoint_ = self.model_.checkpoint()
        return self

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "DualCodebookVQ":
        model = stage1_model_from_checkpoint(ck)
        est = cls()
        est.set_params(**{k: v for k, v in vars(model.cfg).items() if k in est.get_params(deep=False)})
        est.random_state = model.cfg.seed
        est.model_, est.checkpoint_, est.history_ = model, ck, []
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        m = self.model_
        with T.no_grad():
            zh = M.encode(T.Tensor(X), m.params)
        c1 = quantize(zh, m.common)[1].reshape(len(X), -1)
        if m.hq is None:
            return c1
        return np.concatenate([c1, quantize(zh, m.hq)[1].reshape(len(X), -1)], axis=1)

    def inverse_transform(self, codes):
        check_is_fitted(self, "model_")
        codes = np.asarray(codes, dtype=np.int64)
        m = self.model_
        c1 = codes[:, : M.N_TOKENS]
        z = m.common.entries.data[c1]
        if m.hq is not None:
            z = z + m.cfg.alpha * m.hq.entries.data[codes[:, M.N_TOKENS :]]
        with T.no_grad():
            return M.decode(T.Tensor(z.reshape(-1, M.LATENT_GRID, M.LATENT_GRID, M.LATENT_DIM)), m.params).data

    def reconstruct(self, X, scores=None):
        """Routed reconstruction (hq-plus only where the score exceeds ``s_thr``)."""
        check_is_fitted(self, "model_")
        return reconstruct(self.model_, check_images(X), scores)


class QualityConditionedRestorer(BaseEstimator):
    """Stage-II restorer: ``fit(X_lq, X_hq)`` on pairs, ``predict`` at ``bin``.

    ``base`` is a stage-I :class:`Checkpoint` or a fitted :class:`DualCodebookVQ`.
    """

    def __init__(
        self,
        base=None,
        lr=0.1,
        steps=2000,
        batch_size=8,
        lambda1=0.5,
        lambda2=0.1,
        alpha=1.0,
        init_from_stage1=True,
        condition=True,
        defer_quality=False,
        bin=9,
        random_state=7,
    ):
        self.base = base
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.alpha = alpha
        self.init_from_stage1 = init_from_stage1
        self.condition = condition
        self.defer_quality = defer_quality
        self.bin = bin
        self.random_state = random_state

    def _base_checkpoint(self) -> Checkpoint:
        if isinstance(self.base, Checkpoint):
            return self.base
        if isinstance(self.base, DualCodebookVQ):
            check_is_fitted(self.base, "checkpoint_")
            return self.base.checkpoint_
        raise TypeError("base must be a stage-I Checkpoint or a fitted DualCodebookVQ")

    def _config(self) -> Stage2Config:
        p = self.get_params(deep=False)
        for k in ("base", "bin"):
            p.pop(k)
        seed = p.pop("random_state")
        return Stage2Config(seed=seed, **p)

    def fit(self, X, y):
        X, y = check_images(X, "X_lq"), check_images(y, "X_hq")
        if X.shape != y.shape:
            raise ValueError("LQ and HQ batches differ in shape")
        base = self._base_checkpoint()
        self.model_, self.history_ = train_stage2(X, y, base, self._config())
        self.checkpoint_ = self.model_.checkpoint(base)
        return self

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, bin: int = 9) -> "QualityConditionedRestorer":
        model = stage2_model_from_checkpoint(ck)
        est = cls(base=ck, bin=bin)
        est.set_params(**{k: v for k, v in vars(model.cfg).items() if k in est.get_params(deep=False) and k != "base"})
        est.random_state = model.cfg.seed
        est.model_, est.checkpoint_, est.history_ = model, ck, []
        return est

    def predict_codes(self, X, bin=None):
        check_is_fitted(self, "model_")
        return predict_codes_for(self.model_, check_images(X), self.bin if bin is None else bin)

    def predict(self, X, bin=None):
        """Restored ``N×32×32×1`` images."""
        if not 0 <= int(self.bin if bin is None else bin) <= 9:
            raise ValueError("bin must lie in [0, 9]")
        c1, c2 = self.predict_codes(X, bin)
        return decode_latent(self.model_, fused_latent(self.model_, c1, c2))

    def score(self, X, y=None):
        """Mean ensemble quality of the restorations (``y`` is ignored)."""
        return float(self.model_.scorer.score_samples(self.predict(X)).mean())
