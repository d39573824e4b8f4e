"""Synthetic two-batch scenarios and the Monte Carlo harness.

The generator draws a pair of multivariate-normal populations whose means
and covariances differ in controlled ways: a sparse mean shift of size
delta = sqrt(eta / sqrt(p)) on the largest-mean coordinates, and
first-order autoregressive correlation structures with per-population
decay rates.  Standard deviations are tied to the means (sigma_i up to
30% of mu_i), so relative spreads stay in the range where ratio-type
quality metrics are meaningful.

``empirical_rate`` turns any of the homogeneity tests into a rejection
frequency over freshly drawn replicates, with one RNG substream per
attempt so results never depend on execution order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from debatch.core import (
    ContractViolationError,
    DegenerateColumnError,
    NotPositiveDefiniteError,
    RngStream,
    ar1_correlation,
    autoscale,
    mvn_sample,
)
from debatch.gpca import gpca_test
from debatch.hdtest import (
    METHOD_CQ_MEAN,
    METHOD_GPCA,
    METHOD_HN,
    METHOD_LC_COV,
    METHOD_YU_CAUCHY,
    METHOD_YU_FISHER,
    cq_mean_test,
    lc_cov_test,
    simultaneous_test,
)

__all__ = [
    "SCENARIOS",
    "MonteCarloResult",
    "ScenarioSpec",
    "empirical_rate",
    "format_table",
    "gen_population_pair",
    "standard_scenario",
]

SCENARIOS = ("H0", "Hm", "Hc", "HmHc")

_RATE_METHODS = (
    METHOD_YU_FISHER,
    METHOD_YU_CAUCHY,
    METHOD_HN,
    METHOD_CQ_MEAN,
    METHOD_LC_COV,
    METHOD_GPCA,
)


@dataclass(frozen=True)
class ScenarioSpec:
    """One fully parameterized simulation cell.

    The scenario name states which homogeneity actually fails: H0 none,
    Hm the means, Hc the covariances, HmHc both.  Validation enforces
    that the numeric parameters agree with that claim, so a rate computed
    under some label cannot quietly measure a different alternative.
    """

    scenario: str
    n1: int
    n2: int
    p: int
    reps: int
    rng: RngStream
    pct: float = 0.0
    eta: float = 0.0
    rho1: float = 0.0
    rho2: float = 0.0
    alpha_sig: float = 0.05

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractViolationError(
                f"scenario must be one of {SCENARIOS}, got {self.scenario!r}"
            )
        if not isinstance(self.rng, RngStream):
            raise ContractViolationError("rng must be an RngStream")
        for name in ("n1", "n2"):
            if int(getattr(self, name)) < 2:
                raise ContractViolationError(f"{name} must be at least 2")
        if int(self.p) < 2:
            raise ContractViolationError("p must be at least 2")
        if int(self.reps) < 1:
            raise ContractViolationError("reps must be at least 1")
        pct, eta = float(self.pct), float(self.eta)
        rho1, rho2 = float(self.rho1), float(self.rho2)
        if not 0.0 <= pct <= 1.0:
            raise ContractViolationError("pct must lie in [0, 1]")
        if eta < 0.0:
            raise ContractViolationError("eta must be nonnegative")
        for name, rho in (("rho1", rho1), ("rho2", rho2)):
            if not -1.0 < rho < 1.0:
                raise ContractViolationError(
                    f"{name} must lie strictly inside (-1, 1)"
                )
        if not 0.0 < float(self.alpha_sig) < 1.0:
            raise ContractViolationError("alpha_sig must lie in (0, 1)")

        mean_shift = pct > 0.0 and eta > 0.0
        cov_shift = rho1 != rho2
        wanted = {
            "H0": (False, False),
            "Hm": (True, False),
            "Hc": (False, True),
            "HmHc": (True, True),
        }[self.scenario]
        if self.scenario in ("H0", "Hc") and (pct != 0.0 or eta != 0.0):
            raise ContractViolationError(
                f"{self.scenario} requires pct = eta = 0"
            )
        if self.scenario == "H0" and (rho1 != 0.0 or rho2 != 0.0):
            raise ContractViolationError("H0 requires rho1 = rho2 = 0")
        if (mean_shift, cov_shift) != wanted:
            raise ContractViolationError(
                f"parameters (pct={pct}, eta={eta}, rho1={rho1}, "
                f"rho2={rho2}) do not produce the {self.scenario} scenario"
            )
        for name in ("n1", "n2", "p", "reps"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name, v in (("pct", pct), ("eta", eta), ("rho1", rho1),
                        ("rho2", rho2), ("alpha_sig", float(self.alpha_sig))):
            object.__setattr__(self, name, v)


def standard_scenario(
    scenario: str, n1: int, n2: int, p: int, reps: int, rng: RngStream,
    alpha_sig: float = 0.05,
) -> ScenarioSpec:
    """The conventional parameter choices for each scenario name.

    Mean alternatives shift 5% of the coordinates with eta = 0.3;
    covariance alternatives oppose decay rates +0.3 and -0.3.
    """
    params = {
        "H0": dict(),
        "Hm": dict(pct=0.05, eta=0.3),
        "Hc": dict(rho1=0.3, rho2=-0.3),
        "HmHc": dict(pct=0.05, eta=0.3, rho1=0.3, rho2=-0.3),
    }
    if scenario not in params:
        raise ContractViolationError(
            f"scenario must be one of {SCENARIOS}, got {scenario!r}"
        )
    return ScenarioSpec(
        scenario=scenario, n1=n1, n2=n2, p=p, reps=reps, rng=rng,
        alpha_sig=alpha_sig, **params[scenario],
    )


def _draw_populations(spec: ScenarioSpec, gen) -> tuple:
    p = spec.p
    mu = np.sort(gen.uniform(0.0, 1.0, p))[::-1]
    shifted = max(1, int(np.floor(spec.pct * p)))
    delta = np.sqrt(spec.eta * p ** -0.5)
    mu2 = mu.copy()
    mu2[:shifted] += delta
    sigma = gen.uniform(0.0, 0.3 * mu)
    cov = []
    for rho in (spec.rho1, spec.rho2):
        R = ar1_correlation(rho, p) if rho != 0.0 else np.eye(p)
        cov.append((sigma[:, None] * R) * sigma[None, :])
    return mu, mu2, cov[0], cov[1]


def gen_population_pair(spec: ScenarioSpec) -> tuple:
    """Population parameters (mu1, mu2, Sigma1, Sigma2) for one draw.

    Means are U(0,1) sorted descending; the first max{1, floor(pct*p)}
    coordinates of the second mean gain delta = sqrt(eta / sqrt(p));
    both covariances share D = diag(sigma) with sigma_i ~ U(0, 0.3 mu_i)
    and differ only through their correlation decay rates.  The draw is a
    pure function of spec.rng.
    """
    return _draw_populations(spec, spec.rng.generator())


@dataclass(frozen=True)
class MonteCarloResult:
    """Rejection frequency of one method over one simulation cell.

    ``breakdown`` carries component rejection rates when the method
    combines a mean and a covariance test; ``retries`` counts replicates
    that had to be redrawn from a fresh substream after a degenerate
    column.  Wall-clock timing is the only field exempt from bitwise
    reproducibility.
    """

    scenario: str
    method: str
    n1: int
    n2: int
    p: int
    reps: int
    rejection_rate: float
    breakdown: Mapping
    median_time_ms: float
    retries: int

    def __post_init__(self):
        if not 0.0 <= self.rejection_rate <= 1.0:
            raise ContractViolationError(
                "rejection_rate must lie in [0, 1]"
            )
        object.__setattr__(self, "breakdown", dict(self.breakdown))

    def to_report(self) -> dict:
        return {
            "scenario": self.scenario,
            "method": self.method,
            "n1": self.n1,
            "n2": self.n2,
            "p": self.p,
            "reps": self.reps,
            "rejection_rate": self.rejection_rate,
            "breakdown": dict(self.breakdown),
            "median_time_ms": round(self.median_time_ms, 3),
            "retries": self.retries,
        }


def empirical_rate(
    spec: ScenarioSpec, method: str, gpca_perms: int = 1000
) -> MonteCarloResult:
    """Rejection frequency of ``method`` over ``spec.reps`` fresh draws.

    Every replicate redraws the populations, samples both groups, pools
    and autoscales the rows, and runs the test at ``spec.alpha_sig``.
    Attempt k uses substream k of ``spec.rng``; a replicate whose drawn
    covariance or pooled sample is numerically degenerate is retried on
    the next substream and counted in ``retries``.  Timing covers the
    test call only.
    """
    if method not in _RATE_METHODS:
        raise ContractViolationError(
            f"method must be one of {_RATE_METHODS}, got {method!r}"
        )
    codes = np.array([0] * spec.n1 + [1] * spec.n2)
    rejections = 0
    comp_rejections = np.zeros(2, dtype=int)
    times = np.empty(spec.reps)
    completed = 0
    attempt = 0
    retries = 0
    while completed < spec.reps:
        stream = spec.rng.child(attempt)
        attempt += 1
        gen = stream.generator()
        mu1, mu2, S1, S2 = _draw_populations(spec, gen)
        # sigma_i ~ U(0, 0.3 mu_i) puts mass near zero, so a draw can
        # produce a covariance (or a sampled column) too flat to use;
        # such replicates are redrawn from the next substream.
        try:
            X1 = mvn_sample(mu1, S1, spec.n1, stream.child(1))
            X2 = mvn_sample(mu2, S2, spec.n2, stream.child(2))
            pooled = np.vstack([X1, X2])
            Z = autoscale(pooled)
        except (DegenerateColumnError, NotPositiveDefiniteError):
            retries += 1
            continue
        Z1, Z2 = Z[: spec.n1], Z[spec.n1:]

        t0 = time.perf_counter()
        component_p = None
        if method == METHOD_GPCA:
            p_value = gpca_test(
                pooled, codes, n_perm=gpca_perms, rng=stream.child(3)
            ).p_value
        elif method == METHOD_CQ_MEAN:
            p_value = cq_mean_test(Z1, Z2).p_value
        elif method == METHOD_LC_COV:
            p_value = lc_cov_test(Z1, Z2).p_value
        else:
            outcome = simultaneous_test(Z1, Z2, method=method)
            p_value = outcome.p_value
            component_p = outcome.component_p
        times[completed] = time.perf_counter() - t0

        rejections += p_value <= spec.alpha_sig
        if component_p is not None:
            comp_rejections[0] += component_p[0] <= spec.alpha_sig
            comp_rejections[1] += component_p[1] <= spec.alpha_sig
        completed += 1

    breakdown = {}
    if method in (METHOD_HN, METHOD_YU_FISHER, METHOD_YU_CAUCHY):
        breakdown = {
            "mean_component": float(comp_rejections[0]) / spec.reps,
            "cov_component": float(comp_rejections[1]) / spec.reps,
        }
    return MonteCarloResult(
        scenario=spec.scenario,
        method=method,
        n1=spec.n1,
        n2=spec.n2,
        p=spec.p,
        reps=spec.reps,
        rejection_rate=float(rejections) / spec.reps,
        breakdown=breakdown,
        median_time_ms=float(np.median(times)) * 1000.0,
        retries=retries,
    )


def format_table(results, digits: int = 2) -> str:
    """Grid rendering of rejection rates: method rows, dimension columns.

    Rows are keyed by (method, n1, n2) in first-seen order; columns by p
    ascending.  Cells hold percentages.
    """
    results = list(results)
    if not results:
        raise ContractViolationError("no results to format")
    ps = sorted({r.p for r in results})
    rows = {}
    for r in results:
        rows.setdefault((r.method, r.n1, r.n2), {})[r.p] = r.rejection_rate
    header = ["method", "n1,n2"] + [f"p={p}" for p in ps]
    lines = [header]
    for (method, n1, n2), cells in rows.items():
        line = [method, f"{n1},{n2}"]
        for p in ps:
            rate = cells.get(p)
            line.append(
                "-" if rate is None else f"{100.0 * rate:.{digits}f}%"
            )
        lines.append(line)
    widths = [max(len(row[j]) for row in lines) for j in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in lines
    )
