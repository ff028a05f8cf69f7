"""Trainable networks, stored as flat ``{name: Tensor}`` parameter dicts.

Images are channels-last ``N×32×32×1`` batches; latents are ``N×4×4×32``.
Each ``init_*`` returns a fresh dict of named parameters and each forward
function reads the entries under its prefix.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

IMAGE_SIZE = 32
LATENT_GRID = 4
LATENT_DIM = 32
N_TOKENS = LATENT_GRID * LATENT_GRID
N_BINS = 10
PERCEPTUAL_SEED = 20240611
# bound = INIT_GAIN / sqrt(fan_in); sqrt(6) keeps activation variance roughly
# constant through SiLU layers (gain 1 shrinks it by ~3x per layer)
INIT_GAIN = float(np.sqrt(6.0))

Params = dict[str, Tensor]


def _uniform(rng, shape, fan_in, gain=INIT_GAIN):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(p: Params, rng, name: str, k: int, cin: int, cout: int, trainable: bool = True):
    fan_in = k * k * cin
    p[f"{name}.w"] = Tensor(_uniform(rng, (k, k, cin, cout), fan_in), requires_grad=trainable)
    p[f"{name}.b"] = Tensor(_uniform(rng, (cout,), fan_in), requires_grad=trainable)


def _add_linear(p: Params, rng, name: str, din: int, dout: int):
    p[f"{name}.w"] = T.parameter(_uniform(rng, (din, dout), din))
    p[f"{name}.b"] = T.parameter(_uniform(rng, (dout,), din))


def _conv(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    pad = w.shape[0] // 2
    return T.conv2d(x, w, stride=stride, padding=pad) + p[f"{name}.b"]


def _linear(p: Params, name: str, x: Tensor) -> Tensor:
    return T.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _batched(x, extents: tuple[int, ...]) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.shape == extents:
        return T.reshape(x, (1, *extents)), True
    if x.ndim != len(extents) + 1 or x.shape[1:] != extents:
        raise ShapeError(f"expected trailing extents {extents}, got {x.shape}")
    return x, False


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return T.reshape(y, y.shape[1:]) if single else y


# ---------------------------------------------------------------- encoder / decoder


def init_encoder(rng: np.random.Generator, width: int = 16) -> Params:
    p: Params = {}
    _add_conv(p, rng, "enc.in", 3, 1, width)
    _add_conv(p, rng, "enc.down1", 3, width, 2 * width)
    _add_conv(p, rng, "enc.down2", 3, 2 * width, LATENT_DIM)
    _add_conv(p, rng, "enc.down3", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "enc.res.a", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "enc.res.b", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "enc.out", 1, LATENT_DIM, LATENT_DIM)
    return p


def encode(x, p: Params) -> Tensor:
    """``N×32×32×1`` images -> ``N×4×4×32`` latents (a single ``32×32×1`` image is accepted)."""
    x, single = _batched(x, (IMAGE_SIZE, IMAGE_SIZE, 1))
    h = T.silu(_conv(p, "enc.in", x))
    h = T.silu(_conv(p, "enc.down1", h, stride=2))
    h = T.silu(_conv(p, "enc.down2", h, stride=2))
    h = T.silu(_conv(p, "enc.down3", h, stride=2))
    h = h + _conv(p, "enc.res.b", T.silu(_conv(p, "enc.res.a", h)))
    return _unbatch(_conv(p, "enc.out", h), single)


def init_decoder(rng: np.random.Generator, width: int = 16) -> Params:
    p: Params = {}
    _add_conv(p, rng, "dec.in", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "dec.res.a", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "dec.res.b", 3, LATENT_DIM, LATENT_DIM)
    _add_conv(p, rng, "dec.up1", 3, LATENT_DIM, 2 * width)
    _add_conv(p, rng, "dec.up2", 3, 2 * width, width)
    _add_conv(p, rng, "dec.up3", 3, width, width)
    _add_conv(p, rng, "dec.out", 3, width, 1)
    return p


def decode(z, p: Params) -> Tensor:
    """``N×4×4×32`` latents -> ``N×32×32×1`` images in ``[0, 1]``."""
    z, single = _batched(z, (LATENT_GRID, LATENT_GRID, LATENT_DIM))
    h = T.silu(_conv(p, "dec.in", z))
    h = h + _conv(p, "dec.res.b", T.silu(_conv(p, "dec.res.a", h)))
    h = T.silu(_conv(p, "dec.up1", T.upsample_nearest(h, 2)))
    h = T.silu(_conv(p, "dec.up2", T.upsample_nearest(h, 2)))
    h = T.silu(_conv(p, "dec.up3", T.upsample_nearest(h, 2)))
    return _unbatch(T.sigmoid(_conv(p, "dec.out", h)), single)


# ---------------------------------------------------------------- discriminator / perceptual


def init_discriminator(rng: np.random.Generator, width: int = 16) -> Params:
    p: Params = {}
    _add_conv(p, rng, "disc.c1", 3, 1, width)
    _add_conv(p, rng, "disc.c2", 3, width, 2 * width)
    _add_conv(p, rng, "disc.c3", 3, 2 * width, 1)
    return p


def discriminate(x, p: Params) -> Tensor:
    """Patch logits: ``N×4×4×1`` for ``N×32×32×1`` input."""
    x, single = _batched(x, (IMAGE_SIZE, IMAGE_SIZE, 1))
    h = T.silu(_conv(p, "disc.c1", x, stride=2))
    h = T.silu(_conv(p, "disc.c2", h, stride=2))
    return _unbatch(_conv(p, "disc.c3", h, stride=2), single)


def adversarial_value(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Mean of ``log D(x_h) + log(1 - D(x_rec))`` with ``D = sigmoid(logits)``."""
    return -(T.mean(T.softplus(-1.0 * real_logits)) + T.mean(T.softplus(fake_logits)))


def generator_adv_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss ``-mean log D(x_rec)``."""
    return T.mean(T.softplus(-1.0 * fake_logits))


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return -1.0 * adversarial_value(real_logits, fake_logits)


_PERCEPTUAL: Params | None = None


def perceptual_params() -> Params:
    """Frozen random 3-layer stride-2 convolution stack (fixed seed)."""
    global _PERCEPTUAL
    if _PERCEPTUAL is None:
        rng = np.random.default_rng(PERCEPTUAL_SEED)
        p: Params = {}
        for name, cin, cout in (("per.c1", 1, 8), ("per.c2", 8, 16), ("per.c3", 16, 16)):
            _add_conv(p, rng, name, 3, cin, cout, trainable=False)
        _PERCEPTUAL = p
    return _PERCEPTUAL


def perceptual_features(x) -> list[Tensor]:
    x, single = _batched(x, (IMAGE_SIZE, IMAGE_SIZE, 1))
    p = perceptual_params()
    feats = []
    h = x
    for name in ("per.c1", "per.c2", "per.c3"):
        h = T.silu(_conv(p, name, h, stride=2))
        feats.append(_unbatch(h, single))
    return feats


def perceptual_loss(a, b) -> Tensor:
    """Sum over layers of the mean squared feature difference."""
    total = None
    for fa, fb in zip(perceptual_features(a), perceptual_features(b)):
        term = T.mean(T.square(fa - fb))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- conditioning + transformer


def init_score_embedding(rng: np.random.Generator) -> Params:
    size = N_TOKENS * LATENT_DIM
    # additive lookup, no nonlinearity to compensate for: plain 1/sqrt(fan_in)
    return {"emb.table": T.parameter(_uniform(rng, (N_BINS, size), N_BINS, gain=1.0))}


def embed_score(bins, p: Params) -> Tensor:
    """Embedding rows for ``bins`` reshaped to the latent grid."""
    b = np.asarray(bins, dtype=np.int64)
    if b.size and (b.min() < 0 or b.max() >= N_BINS):
        raise ValueError(f"bin outside [0, {N_BINS - 1}]")
    rows = T.take_rows(p["emb.table"], b)
    return T.reshape(rows, (*b.shape, LATENT_GRID, LATENT_GRID, LATENT_DIM))


def init_transformer(
    rng: np.random.Generator,
    n_common: int,
    n_hq: int | None,
    layers: int = 2,
    heads: int = 4,
    ffn: int = 64,
) -> Params:
    d = LATENT_DIM
    if d % heads:
        raise ValueError("model width must be divisible by the head count")
    p: Params = {"tf.pos": T.parameter(_uniform(rng, (N_TOKENS, d), d))}
    for i in range(layers):
        pre = f"tf.l{i}"
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.g"] = T.parameter(np.ones(d))
            p[f"{pre}.{ln}.b"] = T.parameter(np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            _add_linear(p, rng, f"{pre}.{proj}", d, d)
        _add_linear(p, rng, f"{pre}.ff1", d, ffn)
        _add_linear(p, rng, f"{pre}.ff2", ffn, d)
    p["tf.lnf.g"] = T.parameter(np.ones(d))
    p["tf.lnf.b"] = T.parameter(np.zeros(d))
    _add_linear(p, rng, "tf.head1", d, n_common)
    if n_hq:
        _add_linear(p, rng, "tf.head2", d, n_hq)
    # head count is structural; keep it recoverable from the parameters alone
    p["tf.heads"] = Tensor(np.array([heads], dtype=np.float64))
    return p


def _attention(p: Params, pre: str, x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    hd = d // heads

    def split(y):
        return T.transpose(T.reshape(y, (n, t, heads, hd)), (0, 2, 1, 3))

    q = split(_linear(p, f"{pre}.q", x))
    k = split(_linear(p, f"{pre}.k", x))
    v = split(_linear(p, f"{pre}.v", x))
    att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd)), axis=-1)
    y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (n, t, d))
    return _linear(p, f"{pre}.o", y)


def transformer_layers(p: Params) -> int:
    return len({k.split(".")[1] for k in p if k.startswith("tf.l") and not k.startswith("tf.lnf")})


def predict_codes(z_hat, p: Params) -> tuple[Tensor, Tensor | None]:
    """Conditioned latent ``N×4×4×32`` -> per-token logits over each codebook.

    Returns ``(N·16)×N1`` and ``(N·16)×N2`` logit matrices (``16×N`` for a single
    latent); the second is ``None`` for a single-codebook model.
    """
    z_hat, single = _batched(z_hat, (LATENT_GRID, LATENT_GRID, LATENT_DIM))
    n = z_hat.shape[0]
    heads = int(p["tf.heads"].data[0])
    x = T.reshape(z_hat, (n, N_TOKENS, LATENT_DIM)) + p["tf.pos"]
    for i in range(transformer_layers(p)):
        pre = f"tf.l{i}"
        x = x + _attention(p, pre, T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]), heads)
        h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        x = x + _linear(p, f"{pre}.ff2", T.silu(_linear(p, f"{pre}.ff1", h)))
    x = T.reshape(T.layer_norm(x, p["tf.lnf.g"], p["tf.lnf.b"]), (n * N_TOKENS, LATENT_DIM))
    logits1 = _linear(p, "tf.head1", x)
    logits2 = _linear(p, "tf.head2", x) if "tf.head2.w" in p else None
    return logits1, logits2


def trainable(p: Params) -> list[Tensor]:
    return [t for t in p.values() if t.requires_grad]
