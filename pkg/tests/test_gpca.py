"""Tests for the guided-PCA permutation test."""

import numpy as np
import pytest

from debatch.core import RngStream
from debatch.gpca import GpcaOutcome, gpca_test


def _two_batches(rng, n_per, p, shift=0.0):
    X = rng.standard_normal((2 * n_per, p))
    X[n_per:] += shift
    labels = ["A"] * n_per + ["B"] * n_per
    return X, labels


class TestGpcaTest:
    def test_detects_planted_mean_shift(self):
        rng = np.random.default_rng(1)
        X, labels = _two_batches(rng, 15, 40, shift=1.2)
        out = gpca_test(X, labels, n_perm=200, rng=RngStream(7))
        assert out.p_value < 0.05
        assert out.delta > 0.0

    def test_null_p_not_extreme(self):
        rng = np.random.default_rng(2)
        X, labels = _two_batches(rng, 15, 40)
        out = gpca_test(X, labels, n_perm=200, rng=RngStream(8))
        assert out.p_value > 0.05

    def test_null_size_band(self):
        rng = np.random.default_rng(3)
        hits = 0
        reps = 200
        for i in range(reps):
            X, labels = _two_batches(rng, 10, 20)
            out = gpca_test(X, labels, n_perm=99, rng=RngStream(100 + i))
            hits += out.p_value < 0.05
        assert 0.01 <= hits / reps <= 0.11

    def test_determinism(self):
        rng = np.random.default_rng(4)
        X, labels = _two_batches(rng, 8, 12, shift=0.3)
        a = gpca_test(X, labels, n_perm=150, rng=RngStream(55))
        b = gpca_test(X, labels, n_perm=150, rng=RngStream(55))
        assert a.p_value == b.p_value and a.delta == b.delta

    def test_p_value_floor(self):
        rng = np.random.default_rng(5)
        X, labels = _two_batches(rng, 10, 15, shift=50.0)
        out = gpca_test(X, labels, n_perm=49, rng=RngStream(9))
        assert out.p_value == pytest.approx(1.0 / 50.0)

    def test_column_reordering_invariance(self):
        rng = np.random.default_rng(6)
        X, labels = _two_batches(rng, 9, 14, shift=0.5)
        perm = rng.permutation(14)
        a = gpca_test(X, labels, n_perm=100, rng=RngStream(3))
        b = gpca_test(X[:, perm], labels, n_perm=100, rng=RngStream(3))
        assert a.delta == pytest.approx(b.delta, rel=1e-9)
        assert a.p_value == b.p_value

    def test_three_batches(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((30, 25))
        X[20:] += 1.0
        labels = ["A"] * 10 + ["B"] * 10 + ["C"] * 10
        out = gpca_test(X, labels, n_perm=200, rng=RngStream(4))
        assert out.p_value < 0.05

    def test_errors(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((10, 5))
        with pytest.raises(ValueError):
            gpca_test(X, ["A"] * 10)  # single batch
        with pytest.raises(ValueError):
            gpca_test(X, ["A"] * 9 + ["B"])  # batch with 1 sample
        with pytest.raises(ValueError):
            gpca_test(X, ["A"] * 5 + ["B"] * 5, n_perm=0)
        with pytest.raises(ValueError):
            gpca_test(X, ["A"] * 4 + ["B"] * 4)  # label length mismatch
        bad = X.copy()
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            gpca_test(bad, ["A"] * 5 + ["B"] * 5)

    def test_outcome_invariants(self):
        with pytest.raises(ValueError):
            GpcaOutcome(delta=-0.1, p_value=0.5, n_perm=10)
        with pytest.raises(ValueError):
            GpcaOutcome(delta=1.0, p_value=0.0, n_perm=10)
