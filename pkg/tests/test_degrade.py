import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqvq import degrade as D
from iqvq.experiments import make_pairs
from iqvq.quality import QualityScorer, raw_scores


def _dct_matrix(n=8):
    # explicit orthonormal DCT-II basis, independent of scipy.fft
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def _jpeg_oracle(img, q):
    C = _dct_matrix()
    table = D.quant_table(q)
    out = np.empty_like(img)
    for bi in range(0, img.shape[0], 8):
        for bj in range(0, img.shape[1], 8):
            block = img[bi : bi + 8, bj : bj + 8] * 255.0 - 128.0
            coef = np.round(C @ block @ C.T / table) * table
            out[bi : bi + 8, bj : bj + 8] = C.T @ coef @ C
    return np.clip((out + 128.0) / 255.0, 0.0, 1.0)


def test_gaussian_identity_and_constants():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    np.testing.assert_array_equal(D.gaussian_blur(img, 0.0), img)
    np.testing.assert_allclose(D.gaussian_blur(np.full((16, 16), 0.3), 2.5), 0.3, atol=1e-15)


def test_gaussian_impulse_response():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    d = np.arange(-3, 4)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / 2.0)
    out = D.gaussian_blur(img, 1.0)
    np.testing.assert_allclose(out[4:11, 4:11], g / g.sum(), atol=1e-15)
    assert np.abs(out).sum() == pytest.approx(1.0)


def test_resample_examples():
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(D.resample_down(x, 2), [[0.5]])
    np.testing.assert_array_equal(D.resample_up(D.resample_down(x, 2), 2), np.full((2, 2), 0.5))
    img = np.random.default_rng(1).uniform(size=(8, 8))
    np.testing.assert_array_equal(D.resample_down(img, 1), img)
    np.testing.assert_allclose(D.resample_down(np.full((8, 8), 0.7), 4), 0.7, atol=1e-15)
    with pytest.raises(ValueError):
        D.resample_down(np.zeros((6, 6)), 4)


def test_noise_examples():
    img = np.full((64, 64), 0.5)
    np.testing.assert_array_equal(D.add_noise(img, 0.0, 3), img)
    np.testing.assert_array_equal(D.add_noise(img, 7.0, 3), D.add_noise(img, 7.0, 3))
    diff = D.add_noise(img, 20.0, 11) - img
    assert abs(diff.std(ddof=1) - 20 / 255) <= 0.15 * 20 / 255


def test_quant_table_at_pivot():
    np.testing.assert_array_equal(D.quant_table(50), D.JPEG_LUMA)
    assert D.quant_table(90).max() < D.quant_table(30).min() * 10
    with pytest.raises(ValueError):
        D.quant_table(0)


@pytest.mark.parametrize("q", [30, 50, 75, 90])
def test_jpeg_matches_cosine_basis_oracle(q):
    img = np.random.default_rng(q).uniform(size=(16, 24))
    np.testing.assert_allclose(D.jpeg_roundtrip(img, q), _jpeg_oracle(img, q), atol=1e-12)


def test_jpeg_examples():
    np.testing.assert_array_equal(D.jpeg_roundtrip(np.zeros((8, 8)), 50), 0.0)
    assert np.abs(D.jpeg_roundtrip(np.full((16, 16), 0.5), 90) - 0.5).max() <= 0.01
    with pytest.raises(ValueError):
        D.jpeg_roundtrip(np.zeros((12, 8)), 50)


@pytest.mark.parametrize("q", range(1, 101))
def test_jpeg_zero_image_residue_bounded_by_half_dc_step(q):
    # the level shift makes the DC coefficient -1024; its rounding error is at
    # most half a quantization step, spread over 8x8 pixels
    out = D.jpeg_roundtrip(np.zeros((8, 8)), q)
    assert out.max() <= D.quant_table(q)[0, 0] / 2 / 8 / 255 + 1e-15


def test_degrade_minimal_params_mildly_blurs(small_corpus):
    x = small_corpus[0]
    y = D.degrade(x, D.DegradationParams(sigma=1.0, r=1, delta=0.0, q=90), seed=0)
    assert y.shape == x.shape
    assert raw_scores(y[None])[0, 0] < raw_scores(x[None])[0, 0]
    assert np.abs(y - x).mean() < 0.05


def test_degrade_is_deterministic(small_corpus):
    p = D.DegradationParams(2.3, 2, 12.0, 41)
    np.testing.assert_array_equal(D.degrade(small_corpus[3], p, 99), D.degrade(small_corpus[3], p, 99))


def test_degrade_lowers_quality(corpus):
    # the first 32 corpus images with the default pair seed, as gen-pairs makes them
    X = corpus[0]
    scorer = QualityScorer().fit(X)
    Y = make_pairs(X[:32])
    assert (scorer.score_samples(Y) <= scorer.score_samples(X[:32])).sum() >= 30


def test_sampled_params_in_ranges():
    rng = np.random.default_rng(4)
    for _ in range(200):
        p = D.sample_params(rng)
        assert 1 <= p.sigma <= 4 and 0 <= p.delta <= 20 and 30 <= p.q <= 90
        assert p.r in (1, 2, 4)


def test_degrader_rows_reproducible_from_params_and_seed(small_corpus):
    Y, params, seeds = D.Degrader(random_state=10).sample(small_corpus[:4])
    for x, y, p, s in zip(small_corpus[:4], Y, params, seeds):
        np.testing.assert_array_equal(D.degrade(x, p, s), y)


def test_invalid_params_rejected():
    for bad in (dict(sigma=-1, r=1, delta=0, q=50), dict(sigma=1, r=0, delta=0, q=50), dict(sigma=1, r=1, delta=-1, q=50), dict(sigma=1, r=1, delta=0, q=0)):
        with pytest.raises(ValueError):
            D.DegradationParams(**bad)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(0.0, 4.0), st.integers(0, 63))
def test_blur_never_sharpens(s1, s2, i):
    from iqvq.corpus import CorpusSpec, gen_image

    img = gen_image(CorpusSpec(count=64), i)[0]
    lo, hi = sorted((s1, s2))
    a = raw_scores(D.gaussian_blur(img, lo)[None])[0, 0]
    b = raw_scores(D.gaussian_blur(img, hi)[None])[0, 0]
    assert b <= a
