import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate2d

from iqvq import quality as Q
from iqvq.tensor import Tensor, check_gradients, parameter
from iqvq import tensor as T

unit = st.floats(0, 1, allow_nan=False)


def _oracle_proxies(img):
    sx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float)
    gx = correlate2d(img, sx, mode="valid")
    gy = correlate2d(img, sx.T, mode="valid")
    lap = correlate2d(img, np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float), mode="valid")
    return np.hypot(gx, gy).mean(), img.std(), np.abs(lap).mean()


def _checkerboard(n=8):
    return (np.indices((n, n)).sum(axis=0) % 2).astype(float)


def test_constant_image_scores_zero():
    np.testing.assert_array_equal(Q.raw_scores(np.full((1, 32, 32), 0.37)), 0.0)


def test_checkerboard_contrast_is_half_and_matches_oracle():
    cb = _checkerboard()
    raw = Q.raw_scores(cb[None])[0]
    assert raw[1] == 0.5
    np.testing.assert_allclose(raw, _oracle_proxies(cb), rtol=1e-12)


def test_proxies_match_oracle_on_random_images(rng):
    X = rng.uniform(size=(4, 32, 32))
    raw = Q.raw_scores(X)
    for img, r in zip(X, raw):
        np.testing.assert_allclose(r, _oracle_proxies(img), rtol=1e-10)


def test_dog_kernel_oracle():
    d = np.arange(-2, 3)
    rr = d[:, None] ** 2 + d[None, :] ** 2
    g = [np.exp(-rr / (2 * s * s)) for s in (1.0, 1.6)]
    expected = g[0] / g[0].sum() - g[1] / g[1].sum()
    np.testing.assert_allclose(Q.DOG, expected, atol=1e-15)
    img = np.random.default_rng(3).uniform(size=(32, 32))
    want = np.abs(correlate2d(img, expected, mode="valid")).mean()
    assert float(Q.dog_energy(img[None]).data[0]) == pytest.approx(want, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12), elements=unit))
def test_mirror_invariance(img):
    a = Q.raw_scores(img[None])
    np.testing.assert_allclose(a, Q.raw_scores(img[None, :, ::-1]), atol=1e-12)
    np.testing.assert_allclose(a, Q.raw_scores(img[None, ::-1, :]), atol=1e-12)


def test_normalize_examples():
    corpus = np.array([2.0, 4.0, 6.0])
    lo, hi = corpus.min(), corpus.max()
    assert Q.normalize(4.0, lo, hi) == pytest.approx(2 / (4 + 1e-5), abs=1e-15)
    assert Q.normalize(4.0, lo, hi) == pytest.approx(0.4999988, abs=1e-7)
    assert Q.normalize(lo, lo, hi) == 0.0


def test_normalize_degenerate_corpus_maps_to_zero():
    corpus = np.full(5, 3.0)
    np.testing.assert_array_equal(Q.normalize(corpus, corpus.min(), corpus.max()), 0.0)
    # outside the corpus the 1e-5 guard keeps the value finite and clamped
    assert 0.0 <= Q.normalize(7.5, 3.0, 3.0) < 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(0, 10), st.floats(0, 10))
def test_normalized_in_unit_interval(raw, lo, width):
    v = Q.normalize(raw, lo, lo + width)
    assert 0.0 <= v < 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_normalize_monotone(a, b, width):
    lo, hi = 1.0, 1.0 + width
    if a <= b:
        assert Q.normalize(a, lo, hi) <= Q.normalize(b, lo, hi)


def test_ensemble_examples():
    assert Q.ensemble([0.2, 0.4, 0.6]) == pytest.approx(0.4)
    assert Q.ensemble([0.3, 0.3, 0.3]) == pytest.approx(0.3)
    assert Q.ensemble([0.73]) == 0.73
    with pytest.raises(ValueError):
        Q.ensemble([])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 5), elements=unit))
def test_ensemble_is_mean(v):
    assert Q.ensemble(v) == pytest.approx(sum(v) / len(v))


def test_bin_examples():
    assert Q.bin_score(0.93) == 9
    assert Q.bin_score(0.0) == 0
    assert Q.bin_score(1.0) == 9
    assert Q.bin_score(0.5) == 5
    np.testing.assert_array_equal(Q.bin_score(np.array([0.05, 0.15, 0.99])), [0, 1, 9])
    with pytest.raises(ValueError):
        Q.bin_score(-0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2))
def test_bin_formula(s):
    assert Q.bin_score(s) == min(max(int(np.floor(s * 10)), 0), 9)


def test_scorer_fit_records_corpus_extremes(small_corpus):
    sc = Q.QualityScorer().fit(small_corpus)
    raw = Q.raw_scores(small_corpus)
    np.testing.assert_array_equal(sc.s_min_, raw.min(axis=0))
    np.testing.assert_array_equal(sc.s_max_, raw.max(axis=0))
    assert np.all(sc.s_min_ <= sc.s_max_)
    np.testing.assert_array_equal(Q.normalize(sc.s_min_, sc.s_min_, sc.s_max_), 0.0)
    s = sc.score_samples(small_corpus)
    np.testing.assert_allclose(s, sc.transform(small_corpus).mean(axis=1))
    np.testing.assert_array_equal(sc.bins(small_corpus), Q.bin_score(s))
    reports = sc.reports(small_corpus[:3])
    assert [r.bin for r in reports] == list(Q.bin_score(s[:3]))


def test_scorer_requires_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        Q.QualityScorer().transform(np.zeros((1, 8, 8)))


def test_scorer_rejects_non_finite():
    with pytest.raises(ValueError):
        Q.QualityScorer().fit(np.full((1, 8, 8), np.nan))


def test_ensemble_tensor_matches_numpy_and_is_differentiable(small_scorer, rng):
    X = rng.uniform(0.2, 0.8, size=(2, 32, 32, 1))
    t = small_scorer.ensemble_tensor(X)
    np.testing.assert_allclose(t.data, small_scorer.score_samples(X), atol=1e-12)
    x = parameter(X)
    err = check_gradients(lambda: T.sum(small_scorer.ensemble_tensor(x)), [x], max_entries=40)
    assert err <= 1e-4


def test_proxy_gradients(rng):
    x = parameter(rng.uniform(size=(2, 10, 10, 1)))
    for proxy in (*Q.PROXIES, Q.dog_energy):
        assert check_gradients(lambda: T.sum(proxy(x)), [x]) <= 1e-4
