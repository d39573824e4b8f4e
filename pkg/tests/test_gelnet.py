"""Tests for the penalized precision estimator.

Oracles: scalar/closed-form arithmetic for the objective and ridge path,
a brute-force grid search over 2x2 symmetric PD matrices for the mixed
penalty, random-perturbation local-minimum certificates, and the exact
inverse in the vanishing-penalty limit.
"""

import numpy as np
import pytest

from debatch.core import NotPositiveDefiniteError, SpdMatrix
from debatch.gelnet import (
    GelnetConfig,
    GelnetNonConvergenceError,
    gelnet_estimate,
    gelnet_objective,
    ridge_closed_form,
)


def random_psd(rng, p, rank=None):
    rank = rank or p
    X = rng.standard_normal((rank, p))
    return X.T @ X / rank


class TestGelnetObjective:
    def test_identity_everything(self):
        p = 4
        cfg = GelnetConfig(alpha=0.3, lam=2.0, target=np.eye(p))
        assert gelnet_objective(np.eye(p), np.eye(p), cfg) == pytest.approx(p)

    def test_frozen_ridge_point(self):
        cfg = GelnetConfig(alpha=0.0, lam=1.0, target=np.eye(2))
        val = gelnet_objective(2.0 * np.eye(2), np.eye(2), cfg)
        assert val == pytest.approx(-2.0 * np.log(2.0) + 4.0 + 1.0)
        assert val == pytest.approx(3.6137, abs=1e-4)

    def test_frozen_l1_point(self):
        cfg = GelnetConfig(alpha=1.0, lam=0.5, target=np.zeros((3, 3)))
        assert gelnet_objective(np.eye(3), np.eye(3), cfg) == pytest.approx(4.5)

    def test_requires_pd(self):
        cfg = GelnetConfig(alpha=0.5, lam=1.0, target=np.eye(2))
        with pytest.raises(NotPositiveDefiniteError):
            gelnet_objective(np.diag([1.0, -0.5]), np.eye(2), cfg)

    def test_accepts_spd_wrapper(self):
        cfg = GelnetConfig(alpha=0.2, lam=1.0, target=np.eye(2))
        theta = SpdMatrix(np.diag([2.0, 3.0]))
        a = gelnet_objective(theta, np.eye(2), cfg)
        b = gelnet_objective(theta.entries, np.eye(2), cfg)
        assert a == b


class TestRidgeClosedForm:
    def test_identity_fixed_point(self):
        for lam in (0.1, 1.0, 7.3):
            est = ridge_closed_form(np.eye(3), lam, tau=1.0)
            np.testing.assert_allclose(est.theta.entries, np.eye(3), atol=1e-12)

    def test_scalar_quadratic_oracle(self):
        est = ridge_closed_form(np.array([[2.0]]), 1.0, tau=0.0)
        assert est.theta.entries[0, 0] == pytest.approx((-2.0 + np.sqrt(8.0)) / 2.0)
        assert est.theta.entries[0, 0] == pytest.approx(0.41421, abs=1e-5)

    def test_zero_matrix_oracle(self):
        est = ridge_closed_form(np.zeros((2, 2)), 4.0, tau=0.0)
        np.testing.assert_allclose(est.theta.entries, 0.5 * np.eye(2), atol=1e-12)

    def test_stationarity(self):
        rng = np.random.default_rng(3)
        S = random_psd(rng, 6)
        est = ridge_closed_form(S, 0.7, tau=0.5)
        th = est.theta.entries
        grad = -np.linalg.inv(th) + S + 0.7 * (th - 0.5 * np.eye(6))
        assert np.abs(grad).max() < 1e-10
        assert est.kkt_residual < 1e-10

    def test_lambda_validation(self):
        with pytest.raises(ValueError):
            ridge_closed_form(np.eye(2), 0.0, tau=1.0)


class TestGelnetEstimate:
    def test_alpha_zero_matches_closed_form(self):
        rng = np.random.default_rng(11)
        for _ in range(12):
            p = int(rng.integers(2, 21))
            S = random_psd(rng, p, rank=max(2, p // 2))
            lam = float(rng.uniform(0.05, 3.0))
            tau = float(rng.uniform(0.0, 1.5))
            cfg = GelnetConfig(alpha=0.0, lam=lam, target=tau * np.eye(p))
            est = gelnet_estimate(S, cfg)
            ref = ridge_closed_form(S, lam, tau)
            err = np.linalg.norm(est.theta.entries - ref.theta.entries)
            assert err < 1e-6

    def test_grid_search_oracle_2x2(self):
        S = np.array([[1.0, 0.5], [0.5, 1.0]])
        cfg = GelnetConfig(alpha=0.5, lam=1.0, target=np.eye(2))
        est = gelnet_estimate(S, cfg)
        best = np.inf
        for a in np.linspace(0.05, 2.5, 120):
            for b in np.linspace(0.05, 2.5, 120):
                lim = np.sqrt(a * b) * 0.999
                for c in np.linspace(-lim, lim, 81):
                    theta = np.array([[a, c], [c, b]])
                    det = a * b - c * c
                    val = (
                        -np.log(det)
                        + (S * theta).sum()
                        + 1.0
                        * (
                            0.5 * np.abs(theta - np.eye(2)).sum()
                            + 0.25 * ((theta - np.eye(2)) ** 2).sum()
                        )
                    )
                    best = min(best, val)
        assert est.objective <= best + 1e-4

    def test_strong_penalty_pins_to_target(self):
        rng = np.random.default_rng(13)
        p = 8
        S = random_psd(rng, p)
        d = np.sqrt(np.diag(S))
        S = S / np.outer(d, d)  # unit diagonal
        cfg = GelnetConfig(alpha=0.5, lam=9.9, target=np.eye(p))
        est = gelnet_estimate(S, cfg)
        assert np.linalg.norm(est.theta.entries - np.eye(p)) < 0.05

    def test_vanishing_penalty_recovers_inverse(self):
        rng = np.random.default_rng(17)
        p = 5
        S = random_psd(rng, p) + 0.5 * np.eye(p)
        cfg = GelnetConfig(
            alpha=0.5, lam=1e-7, target=np.eye(p), tol=1e-10, max_iter=5000
        )
        est = gelnet_estimate(S, cfg)
        assert np.abs(est.theta.entries - np.linalg.inv(S)).max() < 1e-4

    def test_rank_deficient_input_gives_pd_output(self):
        rng = np.random.default_rng(19)
        p, n = 15, 6
        X = rng.standard_normal((n, p))
        S = X.T @ X / n
        cfg = GelnetConfig(alpha=0.7, lam=0.5, target=np.eye(p))
        est = gelnet_estimate(S, cfg)
        assert np.linalg.eigvalsh(est.theta.entries)[0] > 0.0
        assert est.kkt_residual <= 10.0 * cfg.tol

    def test_local_minimum_certificate(self):
        rng = np.random.default_rng(23)
        p = 6
        S = random_psd(rng, p)
        cfg = GelnetConfig(alpha=0.4, lam=0.8, target=0.5 * np.eye(p))
        est = gelnet_estimate(S, cfg)
        base = est.objective
        for _ in range(200):
            E = rng.standard_normal((p, p)) * 0.01
            E = 0.5 * (E + E.T)
            cand = est.theta.entries + E
            if np.linalg.eigvalsh(cand)[0] <= 0:
                continue
            assert gelnet_objective(cand, S, cfg) >= base - 1e-6

    def test_objective_trace_monotone(self):
        rng = np.random.default_rng(29)
        S = random_psd(rng, 10, rank=4)
        cfg = GelnetConfig(alpha=0.6, lam=0.3, target=np.eye(10))
        est = gelnet_estimate(S, cfg)
        trace = np.array(est.objective_trace)
        assert (np.diff(trace) <= 1e-12).all()
        assert est.objective == pytest.approx(trace[-1])

    def test_non_convergence_carries_iterate(self):
        rng = np.random.default_rng(31)
        S = random_psd(rng, 8)
        cfg = GelnetConfig(
            alpha=0.5, lam=0.2, target=np.eye(8), tol=1e-12, max_iter=2
        )
        with pytest.raises(GelnetNonConvergenceError) as exc:
            gelnet_estimate(S, cfg)
        est = exc.value.estimate
        assert est.iterations <= 2
        assert np.linalg.eigvalsh(est.theta.entries)[0] > 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GelnetConfig(alpha=-0.1, lam=1.0, target=np.eye(2))
        with pytest.raises(ValueError):
            GelnetConfig(alpha=0.5, lam=0.0, target=np.eye(2))
        with pytest.raises(ValueError):
            GelnetConfig(alpha=0.5, lam=1.0, target=np.array([[0.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            GelnetConfig(alpha=0.5, lam=1.0, target=np.eye(3), max_iter=0)

    def test_dimension_mismatch(self):
        cfg = GelnetConfig(alpha=0.5, lam=1.0, target=np.eye(3))
        with pytest.raises(ValueError):
            gelnet_estimate(np.eye(4), cfg)
