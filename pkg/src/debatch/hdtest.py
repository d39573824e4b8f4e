"""High-dimensional two-sample homogeneity tests and their combinations.

Implements tests that stay calibrated when the variable count p exceeds the
sample sizes, where classical Hotelling or likelihood ratio machinery breaks
down:

* ``cq_mean_test``     U-statistic test of equal mean vectors
* ``lc_cov_test``      U-statistic test of equal covariance matrices
* ``hn_simultaneous``  single combined statistic for both parameters
* ``combine_fisher`` / ``combine_cauchy``   p-value combination rules
* ``simultaneous_test``  front door with automatic method selection
* ``bh_fdr``           Benjamini-Hochberg step-up adjustment
* ``qc_st``            pairwise batch screening on pooled QC samples

All distance statistics are one-sided: the estimands (squared mean distance,
squared covariance distance) are nonnegative under any alternative, so only
the upper tail signals a difference.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from debatch.core import BatchedDataset, autoscale

METHOD_CQ_MEAN = "cq_mean"
METHOD_LC_COV = "lc_cov"
METHOD_HN = "hn"
METHOD_YU_FISHER = "yu_fisher"
METHOD_YU_CAUCHY = "yu_cauchy"
METHOD_GPCA = "gpca"

_SIMULTANEOUS = (METHOD_HN, METHOD_YU_FISHER, METHOD_YU_CAUCHY)

# Smallest admissible variance estimate; statistics divide by its square
# root, so zero must not pass through.
_VAR_FLOOR = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class TestOutcome:
    """Result of one homogeneity test.

    ``component_p`` carries (p_mean, p_cov) and is present exactly when the
    method combines both parameters into a simultaneous decision.
    """

    statistic: float
    p_value: float
    method: str
    component_p: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value out of [0,1]: {self.p_value}")
        has_components = self.component_p is not None
        if has_components != (self.method in _SIMULTANEOUS):
            raise ValueError(
                f"component_p must be present iff the method is simultaneous; "
                f"method={self.method!r}"
            )


@dataclass(frozen=True)
class PairwiseReport:
    """Pairwise batch-effect screen over the pooled QC samples.

    ``q_matrix`` holds FDR-adjusted simultaneous p-values for every batch
    pair (diagonal is NaN, matrix symmetric).  ``followup`` maps each pair
    with q below ``alpha_sig`` to its raw (p_mean, p_cov) component
    p-values, which localize the offending parameter.  ``p_matrix`` and
    ``methods`` keep the raw p-values and per-pair test choices for
    reporting.
    """

    batches: tuple
    q_matrix: np.ndarray
    followup: dict
    alpha_sig: float
    p_matrix: np.ndarray
    methods: dict

    def pairs(self) -> list:
        b = self.batches
        return [(b[i], b[j]) for i, j in itertools.combinations(range(len(b)), 2)]

    def significant_pairs(self) -> list:
        out = []
        for i, j in itertools.combinations(range(len(self.batches)), 2):
            if self.q_matrix[i, j] < self.alpha_sig:
                out.append((self.batches[i], self.batches[j]))
        return out


def _check_pair(X1, X2, min_n: int) -> tuple[np.ndarray, np.ndarray]:
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.ndim != 2 or X2.ndim != 2:
        raise ValueError("samples must be 2-dimensional matrices")
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(
            f"samples must share the variable dimension, got "
            f"{X1.shape[1]} and {X2.shape[1]}"
        )
    if X1.shape[0] < min_n or X2.shape[0] < min_n:
        raise ValueError(
            f"each sample needs at least {min_n} rows, got "
            f"{X1.shape[0]} and {X2.shape[0]}"
        )
    if not (np.isfinite(X1).all() and np.isfinite(X2).all()):
        raise ValueError("samples contain non-finite entries")
    return X1, X2


def _tr_sigma_sq_ustat(G: np.ndarray) -> float:
    """U-statistic estimate of tr(Sigma^2) from one sample's Gram matrix.

    For each ordered pair (j,k), the contribution is
    (x_j'x_k - x_j'xbar_(jk)) (x_j'x_k - x_k'xbar_(jk))
    with xbar_(jk) the sample mean excluding rows j and k; location
    invariant, so no centering is applied beforehand.
    """
    n = G.shape[0]
    t = G.sum(axis=1)
    d = np.diag(G)
    # left[j,k] = g_jk - (t_j - g_jj - g_jk)/(n-2), right is its transpose
    left = G - (t[:, None] - d[:, None] - G) / (n - 2)
    prod = left * left.T
    np.fill_diagonal(prod, 0.0)
    return float(prod.sum()) / (n * (n - 1))


def _tr_sigma_cross_ustat(H: np.ndarray) -> float:
    """U-statistic estimate of tr(Sigma1 Sigma2) from the cross Gram H."""
    n1, n2 = H.shape
    u = H.sum(axis=1)
    v = H.sum(axis=0)
    left = H - (u[:, None] - H) / (n2 - 1)
    right = H - (v[None, :] - H) / (n1 - 1)
    return float((left * right).sum()) / (n1 * n2)


def cq_mean_test(X1, X2) -> TestOutcome:
    """Test of equal mean vectors for high-dimensional two-sample data.

    The statistic estimates the squared Euclidean distance between the two
    mean vectors through between-row inner products only (no covariance
    inversion), then standardizes by a U-statistic variance estimate, so it
    remains usable when p far exceeds n.
    """
    X1, X2 = _check_pair(X1, X2, 3)
    n1, n2 = X1.shape[0], X2.shape[0]
    G1 = X1 @ X1.T
    G2 = X2 @ X2.T
    H = X1 @ X2.T

    off1 = float(G1.sum() - np.trace(G1))
    off2 = float(G2.sum() - np.trace(G2))
    location = (
        off1 / (n1 * (n1 - 1))
        + off2 / (n2 * (n2 - 1))
        - 2.0 * float(H.sum()) / (n1 * n2)
    )

    tr1 = _tr_sigma_sq_ustat(G1)
    tr2 = _tr_sigma_sq_ustat(G2)
    tr12 = _tr_sigma_cross_ustat(H)
    var = (
        2.0 / (n1 * (n1 - 1)) * tr1
        + 2.0 / (n2 * (n2 - 1)) * tr2
        + 4.0 / (n1 * n2) * tr12
    )
    var = max(var, _VAR_FLOOR)
    z = location / np.sqrt(var)
    return TestOutcome(float(z), float(stats.norm.sf(z)), METHOD_CQ_MEAN)


def _cov_distance_parts(G: np.ndarray) -> float:
    """U-statistic estimate of tr(Sigma^2) that also removes the mean.

    Combines second, third and fourth order sums over distinct row indices;
    each piece is computed from the Gram matrix in O(n^2).
    """
    n = G.shape[0]
    Goff = G - np.diag(np.diag(G))
    P1 = float((Goff * Goff).sum())
    o = Goff.sum(axis=1)
    s = (Goff * Goff).sum(axis=1)
    W = float((o * o - s).sum())
    T0 = float(Goff.sum())
    D = T0 * T0 - 4.0 * W - 2.0 * P1
    return (
        P1 / (n * (n - 1))
        - 2.0 * W / (n * (n - 1) * (n - 2))
        + D / (n * (n - 1) * (n - 2) * (n - 3))
    )


def _cov_cross_parts(H: np.ndarray) -> float:
    """U-statistic estimate of tr(Sigma1 Sigma2) with mean removal."""
    n1, n2 = H.shape
    F = float((H * H).sum())
    r = H.sum(axis=1)
    c = H.sum(axis=0)
    e = (H * H).sum(axis=1)
    d = (H * H).sum(axis=0)
    S = float(H.sum())
    term1 = F / (n1 * n2)
    term2 = float((c * c - d).sum()) / (n1 * n2 * (n1 - 1))
    term3 = float((r * r - e).sum()) / (n1 * n2 * (n2 - 1))
    term4 = (S * S - float((r * r).sum()) - float((c * c).sum()) + F) / (
        n1 * n2 * (n1 - 1) * (n2 - 1)
    )
    return term1 - term2 - term3 + term4


def lc_cov_test(X1, X2) -> TestOutcome:
    """Test of equal covariance matrices for high-dimensional data.

    Estimates tr((Sigma1 - Sigma2)^2) by U-statistics of the raw inner
    products (valid without normality-style fourth-moment shortcuts) and
    standardizes by the null-variance estimate 2(1/n1 + 1/n2) tr(Sigma^2),
    with tr(Sigma^2) pooled from both samples.
    """
    X1, X2 = _check_pair(X1, X2, 4)
    n1, n2 = X1.shape[0], X2.shape[0]
    A1 = _cov_distance_parts(X1 @ X1.T)
    A2 = _cov_distance_parts(X2 @ X2.T)
    C = _cov_cross_parts(X1 @ X2.T)
    statistic = A1 + A2 - 2.0 * C

    pooled_tr = (n1 * A1 + n2 * A2) / (n1 + n2)
    sd0 = 2.0 * (1.0 / n1 + 1.0 / n2) * max(pooled_tr, _VAR_FLOOR)
    z = statistic / sd0
    return TestOutcome(float(z), float(stats.norm.sf(z)), METHOD_LC_COV)


def combine_fisher(p_mean: float, p_cov: float) -> float:
    """Fisher combination of two p-values against chi-square with 4 df."""
    ps = []
    for name, p in (("p_mean", p_mean), ("p_cov", p_cov)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0,1], got {p}")
        if p == 0.0:
            warnings.warn(
                f"{name}=0 clamped to 1e-300 before the log transform",
                RuntimeWarning,
                stacklevel=2,
            )
            p = 1e-300
        ps.append(p)
    statistic = -2.0 * (np.log(ps[0]) + np.log(ps[1]))
    return float(stats.chi2.sf(statistic, df=4))


def combine_cauchy(p_mean: float, p_cov: float) -> float:
    """Cauchy combination: average of tan-transformed p-values."""
    ps = []
    for name, p in (("p_mean", p_mean), ("p_cov", p_cov)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0,1], got {p}")
        clamped = min(max(p, 1e-15), 1.0 - 1e-15)
        if clamped != p:
            warnings.warn(
                f"{name}={p} clamped into [1e-15, 1-1e-15]",
                RuntimeWarning,
                stacklevel=2,
            )
        ps.append(clamped)
    C = 0.5 * np.tan((0.5 - ps[0]) * np.pi) + 0.5 * np.tan((0.5 - ps[1]) * np.pi)
    return float(0.5 - np.arctan(C) / np.pi)


def _unbiased_tr_sq_from_cov(S: np.ndarray, dof: int) -> float:
    """Unbiased tr(Sigma^2) from a covariance matrix with given dof.

    For S distributed as Wishart(Sigma, m)/m the combination
    m^2/((m+2)(m-1)) (tr(S^2) - tr(S)^2/m) has expectation tr(Sigma^2);
    it is nonnegative because rank(S) <= m.
    """
    m = dof
    tr_s2 = float((S * S).sum())
    tr_s = float(np.trace(S))
    return m * m / ((m + 2.0) * (m - 1.0)) * (tr_s2 - tr_s * tr_s / m)


def hn_simultaneous(X1, X2) -> TestOutcome:
    """Simultaneous test from one combined mean-plus-covariance statistic.

    Standardizes a squared mean distance estimate and a squared covariance
    distance estimate separately (each against its own null variance, both
    built from trace moments of the sample covariances), then refers their
    sum over sqrt(2) to the standard normal upper tail.  Suited to very
    small samples where the p-value combination route loses calibration.
    """
    X1, X2 = _check_pair(X1, X2, 3)
    n1, n2 = X1.shape[0], X2.shape[0]
    xb1 = X1.mean(axis=0)
    xb2 = X2.mean(axis=0)
    S1 = np.cov(X1, rowvar=False, ddof=1)
    S2 = np.cov(X2, rowvar=False, ddof=1)
    S1 = np.atleast_2d(S1)
    S2 = np.atleast_2d(S2)

    # mean part: unbiased ||mu1 - mu2||^2 and its null variance
    diff = xb1 - xb2
    t_mean = float(diff @ diff) - np.trace(S1) / n1 - np.trace(S2) / n2
    a1 = _unbiased_tr_sq_from_cov(S1, n1 - 1)
    a2 = _unbiased_tr_sq_from_cov(S2, n2 - 1)
    c12 = float((S1 * S2).sum())
    var_mean = 2.0 * (
        a1 / (n1 * n1) + 2.0 * c12 / (n1 * n2) + a2 / (n2 * n2)
    )
    z_mean = t_mean / np.sqrt(max(var_mean, _VAR_FLOOR))

    # covariance part: unbiased tr((Sigma1-Sigma2)^2) against the pooled
    # null standard deviation 2(1/n1+1/n2) tr(Sigma^2)
    t_cov = a1 + a2 - 2.0 * c12
    m = n1 + n2 - 2
    S_pool = ((n1 - 1) * S1 + (n2 - 1) * S2) / m
    pooled_tr = _unbiased_tr_sq_from_cov(S_pool, m)
    sd_cov = 2.0 * (1.0 / n1 + 1.0 / n2) * max(pooled_tr, _VAR_FLOOR)
    z_cov = t_cov / sd_cov

    z = (z_mean + z_cov) / np.sqrt(2.0)
    p_mean = float(stats.norm.sf(z_mean))
    p_cov = float(stats.norm.sf(z_cov))
    return TestOutcome(
        float(z), float(stats.norm.sf(z)), METHOD_HN, (p_mean, p_cov)
    )


def simultaneous_test(X1, X2, method: str = "auto") -> TestOutcome:
    """Simultaneous mean-and-covariance test with automatic selection.

    method='auto' picks the Fisher combination when the average sample
    size reaches 10 and the combined small-sample statistic otherwise;
    the combination route needs the larger samples to keep its component
    tests calibrated.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if method not in ("auto", METHOD_HN, METHOD_YU_FISHER, METHOD_YU_CAUCHY):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        mean_n = (X1.shape[0] + X2.shape[0]) / 2.0
        method = METHOD_YU_FISHER if mean_n >= 10 else METHOD_HN
    if method == METHOD_HN:
        return hn_simultaneous(X1, X2)
    mean_out = cq_mean_test(X1, X2)
    cov_out = lc_cov_test(X1, X2)
    p_mean, p_cov = mean_out.p_value, cov_out.p_value
    if method == METHOD_YU_FISHER:
        p = combine_fisher(p_mean, p_cov)
        statistic = -2.0 * (np.log(max(p_mean, 1e-300)) + np.log(max(p_cov, 1e-300)))
    else:
        p = combine_cauchy(p_mean, p_cov)
        pm = min(max(p_mean, 1e-15), 1.0 - 1e-15)
        pc = min(max(p_cov, 1e-15), 1.0 - 1e-15)
        statistic = 0.5 * np.tan((0.5 - pm) * np.pi) + 0.5 * np.tan(
            (0.5 - pc) * np.pi
        )
    return TestOutcome(float(statistic), p, method, (p_mean, p_cov))


def bh_fdr(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up q-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("p_values must be a non-empty 1-d sequence")
    if ((p < 0.0) | (p > 1.0)).any() or not np.isfinite(p).all():
        raise ValueError("p_values must lie in [0,1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q_sorted = np.minimum(q_sorted, 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q


def qc_st(
    dataset: BatchedDataset, alpha_sig: float = 0.05, method: str = "auto"
) -> PairwiseReport:
    """Screen every batch pair for effects using pooled QC samples.

    The QC rows of all batches are autoscaled together once, each of the
    B(B-1)/2 pairs runs the simultaneous test on its autoscaled QC rows,
    and the resulting p-values are adjusted jointly by the step-up rule.
    Pairs that stay significant after adjustment get raw component
    p-values so the caller can see whether means, covariances or both
    moved.
    """
    if not 0.0 < alpha_sig < 1.0:
        raise ValueError(f"alpha_sig must lie in (0,1), got {alpha_sig}")
    batches = dataset.batches
    if len(batches) < 2:
        raise ValueError("qc_st needs at least 2 batches")
    for b in batches:
        if dataset.qc_values(b).shape[0] < 3:
            raise ValueError(f"batch {b!r} needs at least 3 qc samples")

    qc_rows = dataset.mask(role="qc")
    scaled = autoscale(dataset.values[qc_rows])
    qc_batch = np.array(dataset.batch)[qc_rows]

    B = len(batches)
    pair_idx = list(itertools.combinations(range(B), 2))
    p_raw = np.full((B, B), np.nan)
    methods: dict = {}
    components: dict = {}
    for i, j in pair_idx:
        Xi = scaled[qc_batch == batches[i]]
        Xj = scaled[qc_batch == batches[j]]
        outcome = simultaneous_test(Xi, Xj, method=method)
        p_raw[i, j] = p_raw[j, i] = outcome.p_value
        methods[(batches[i], batches[j])] = outcome.method
        components[(batches[i], batches[j])] = outcome.component_p

    flat_p = np.array([p_raw[i, j] for i, j in pair_idx])
    flat_q = bh_fdr(flat_p)
    q_matrix = np.full((B, B), np.nan)
    followup: dict = {}
    for (i, j), q in zip(pair_idx, flat_q):
        q_matrix[i, j] = q_matrix[j, i] = q
        if q < alpha_sig:
            followup[(batches[i], batches[j])] = components[(batches[i], batches[j])]

    return PairwiseReport(
        batches=batches,
        q_matrix=q_matrix,
        followup=followup,
        alpha_sig=float(alpha_sig),
        p_matrix=p_raw,
        methods=methods,
    )
