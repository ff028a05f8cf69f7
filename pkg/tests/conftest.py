"""Shared fixtures. Full-size trained models are built once per session."""

import time

import numpy as np
import pytest

from iqvq.corpus import CorpusSpec, gen_corpus
from iqvq.experiments import eval_set, holdout_set, make_pairs
from iqvq.quality import QualityScorer
from iqvq.train import Stage1Config, Stage2Config, train_stage1, train_stage2

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_corpus():
    X, _ = gen_corpus(CorpusSpec(count=64))
    return X


@pytest.fixture(scope="session")
def small_scorer(small_corpus):
    return QualityScorer().fit(small_corpus)


@pytest.fixture(scope="session")
def micro_stage1(small_corpus, small_scorer):
    model, _ = train_stage1(small_corpus, Stage1Config(steps=200), scorer=small_scorer)
    return model


@pytest.fixture(scope="session")
def micro_stage2(micro_stage1, small_corpus):
    X_l = make_pairs(small_corpus)
    model, _ = train_stage2(X_l, small_corpus, micro_stage1.checkpoint(), Stage2Config(steps=20))
    return model


class Timed:
    def __init__(self, value, seconds):
        self.value, self.seconds = value, seconds


def _timed(fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return Timed(out, time.perf_counter() - t)


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(CorpusSpec())


@pytest.fixture(scope="session")
def holdout():
    return holdout_set()


@pytest.fixture(scope="session")
def pairs(corpus):
    return make_pairs(corpus[0])


@pytest.fixture(scope="session")
def evaluation():
    return eval_set()


@pytest.fixture(scope="session")
def stage1_dual(corpus, holdout):
    return _timed(train_stage1, corpus[0], Stage1Config(), holdout=holdout)


@pytest.fixture(scope="session")
def stage1_single(corpus, holdout):
    return _timed(train_stage1, corpus[0], Stage1Config(n_hq=0), holdout=holdout)


@pytest.fixture(scope="session")
def stage2_full(stage1_dual, corpus, pairs):
    base = stage1_dual.value[0].checkpoint()
    return _timed(train_stage2, pairs, corpus[0], base, Stage2Config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
