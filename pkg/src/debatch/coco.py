"""Covariance correction across batches.

Batches that agree in means can still disagree in covariance structure.
This module estimates an invertible per-batch covariance from the QC
samples via the penalized precision solver, builds linear maps that pull
every batch toward a sample-size-weighted pooled covariance, and selects
the penalty hyperparameters by constrained random search: a candidate is
feasible when no batch pair shows a significant QC covariance difference
after the maps are applied, and among feasible candidates the one that
perturbs subject-sample variances least wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from debatch.core import (
    BatchedDataset,
    ContractViolationError,
    DegenerateColumnError,
    NotPositiveDefiniteError,
    RngStream,
    SpdMatrix,
    autoscale,
    empirical_cov,
    spd_sqrt,
)
from debatch.gelnet import (
    GelnetConfig,
    GelnetNonConvergenceError,
    PrecisionEstimate,
    gelnet_estimate,
)
from debatch.hdtest import bh_fdr, lc_cov_test


__all__ = [
    "CocoConfig",
    "CocoPlan",
    "CocoInfeasibleError",
    "pooled_covariance",
    "transformation_matrix",
    "apply_coco",
    "variance_fold_change",
    "condition_one_qvalues",
    "coco_search",
]


@dataclass(frozen=True)
class CocoConfig:
    """Search settings for the covariance-correction hyperparameters.

    ``alpha_range`` and ``lambda_range`` bound the uniform draws for the
    per-batch penalty mix and strength; the lambda draw is strictly
    positive even when the lower bound is 0.  ``target_policy`` is the
    shrinkage target for every batch (identity when None), or a sequence
    with one target per batch.  ``gelnet_tol`` / ``gelnet_max_iter`` are
    forwarded to each precision fit.
    """

    rng: RngStream
    n_search: int = 500
    alpha_range: tuple = (0.0, 1.0)
    lambda_range: tuple = (0.0, 10.0)
    target_policy: Optional[object] = None
    alpha_sig: float = 0.05
    gelnet_tol: float = 1e-6
    gelnet_max_iter: int = 500

    def __post_init__(self):
        if not isinstance(self.rng, RngStream):
            raise ContractViolationError("rng must be an RngStream")
        if int(self.n_search) < 1:
            raise ContractViolationError("n_search must be at least 1")
        object.__setattr__(self, "n_search", int(self.n_search))
        a_lo, a_hi = (float(x) for x in self.alpha_range)
        l_lo, l_hi = (float(x) for x in self.lambda_range)
        if not (0.0 <= a_lo < a_hi <= 1.0):
            raise ContractViolationError(
                f"alpha_range must be a sub-interval of [0, 1], got "
                f"({a_lo}, {a_hi})"
            )
        if not (0.0 <= l_lo < l_hi <= 10.0):
            raise ContractViolationError(
                f"lambda_range must be a sub-interval of (0, 10], got "
                f"({l_lo}, {l_hi})"
            )
        object.__setattr__(self, "alpha_range", (a_lo, a_hi))
        object.__setattr__(self, "lambda_range", (l_lo, l_hi))
        if not 0.0 < float(self.alpha_sig) < 1.0:
            raise ContractViolationError("alpha_sig must lie in (0, 1)")
        object.__setattr__(self, "alpha_sig", float(self.alpha_sig))
        if float(self.gelnet_tol) <= 0.0:
            raise ContractViolationError("gelnet_tol must be positive")
        if int(self.gelnet_max_iter) < 1:
            raise ContractViolationError("gelnet_max_iter must be at least 1")
        object.__setattr__(self, "gelnet_tol", float(self.gelnet_tol))
        object.__setattr__(self, "gelnet_max_iter", int(self.gelnet_max_iter))

    def target_for(self, batch_index: int, p: int) -> np.ndarray:
        """Resolve the shrinkage target for one batch."""
        pol = self.target_policy
        if pol is None:
            return np.eye(p)
        if isinstance(pol, np.ndarray):
            return pol
        return np.asarray(pol[batch_index], dtype=float)


@dataclass(frozen=True)
class CocoPlan:
    """Selected correction: one linear map per batch plus its provenance.

    ``A[j]`` right-multiplies mean-centered rows of batch ``batches[j]``.
    ``V`` holds subject-row variance fold changes (batch x variable) and
    ``mean_V`` their grand mean; ``candidates_passing`` counts how many
    sampled hyperparameter settings satisfied the pairwise covariance
    feasibility condition.
    """

    batches: tuple
    A: np.ndarray
    alphas: np.ndarray
    lambdas: np.ndarray
    V: np.ndarray
    mean_V: float
    candidates_passing: int

    def __post_init__(self):
        batches = tuple(str(b) for b in self.batches)
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 3 or A.shape[0] != len(batches) or A.shape[1] != A.shape[2]:
            raise ContractViolationError(
                "A must be a (B, p, p) stack aligned with batches"
            )
        for j in range(A.shape[0]):
            sign, logdet = np.linalg.slogdet(A[j])
            if sign == 0 or not np.isfinite(logdet):
                raise ContractViolationError(
                    f"transformation matrix for batch {batches[j]!r} is "
                    f"singular"
                )
        alphas = np.asarray(self.alphas, dtype=float)
        lambdas = np.asarray(self.lambdas, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if alphas.shape != (len(batches),) or lambdas.shape != (len(batches),):
            raise ContractViolationError(
                "alphas and lambdas must hold one value per batch"
            )
        if V.shape != (len(batches), A.shape[1]):
            raise ContractViolationError("V must be batch x variable shaped")
        if not float(self.mean_V) > 0.0:
            raise ContractViolationError("mean_V must be positive")
        if int(self.candidates_passing) < 0:
            raise ContractViolationError("candidates_passing must be >= 0")
        for name, arr in (("A", A), ("alphas", alphas),
                          ("lambdas", lambdas), ("V", V)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "batches", batches)
        object.__setattr__(self, "mean_V", float(self.mean_V))
        object.__setattr__(
            self, "candidates_passing", int(self.candidates_passing)
        )

    def matrix_for(self, batch) -> np.ndarray:
        label = str(batch)
        if label not in self.batches:
            raise ContractViolationError(
                f"batch {label!r} has no transformation in this plan"
            )
        return self.A[self.batches.index(label)]


class CocoInfeasibleError(ContractViolationError):
    """No sampled hyperparameter setting passed the covariance condition.

    ``best`` carries the evaluated candidate whose worst pairwise q-value
    was largest (None when every fit failed to converge), so callers can
    inspect how close the search came.
    """

    def __init__(self, message: str, best: Optional[CocoPlan]):
        super().__init__(message)
        self.best = best


def _as_cov_array(obj, name: str) -> np.ndarray:
    if isinstance(obj, SpdMatrix):
        return obj.entries
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractViolationError(f"{name} must be a square matrix")
    return arr


def pooled_covariance(sigmas: Sequence, n: Sequence[int]) -> SpdMatrix:
    """Sample-size-weighted average of per-batch covariance estimates."""
    mats = [_as_cov_array(s, f"sigmas[{i}]") for i, s in enumerate(sigmas)]
    if not mats:
        raise ContractViolationError("at least one covariance is required")
    weights = np.asarray(n, dtype=float)
    if weights.shape != (len(mats),):
        raise ContractViolationError(
            "n must supply exactly one sample size per covariance"
        )
    if (weights < 1).any():
        raise ContractViolationError("every sample size must be at least 1")
    p = mats[0].shape[0]
    for i, m in enumerate(mats):
        if m.shape != (p, p):
            raise ContractViolationError(
                f"sigmas[{i}] is {m.shape}, expected ({p}, {p})"
            )
    total = np.zeros((p, p))
    for w, m in zip(weights, mats):
        total += w * m
    return SpdMatrix(total / weights.sum())


def transformation_matrix(theta_j, sigma_pooled) -> np.ndarray:
    """Map one batch onto the pooled covariance: sqrt(theta) @ sqrt(pooled).

    Right-multiplying mean-centered rows with population covariance
    ``inv(theta_j)`` by this matrix yields rows whose covariance is the
    pooled one.
    """
    if isinstance(theta_j, PrecisionEstimate):
        theta = theta_j.theta.entries
    else:
        theta = _as_cov_array(theta_j, "theta_j")
    pooled = _as_cov_array(sigma_pooled, "sigma_pooled")
    if pooled.shape != theta.shape:
        raise ContractViolationError(
            f"theta is {theta.shape} but pooled covariance is {pooled.shape}"
        )
    return spd_sqrt(theta) @ spd_sqrt(pooled)


def _transform_group(rows: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Center rows, apply the map, and restore the original column means."""
    means = rows.mean(axis=0)
    return (rows - means) @ A + means


def _pre_variances(rows: np.ndarray) -> np.ndarray:
    """Column variances, raising on columns that are constant to rounding.

    The floor is relative to the column magnitude: a literally constant
    column can come back with variance ~eps^2 from mean rounding, and
    dividing by it would manufacture huge fold changes.
    """
    var = rows.var(axis=0, ddof=1)
    floor = (64.0 * np.finfo(float).eps
             * np.maximum(1.0, np.abs(rows).max(axis=0))) ** 2
    dead = np.flatnonzero(var <= floor)
    if dead.size:
        raise DegenerateColumnError(dead)
    return var


def apply_coco(dataset: BatchedDataset, plan: CocoPlan) -> BatchedDataset:
    """Apply a correction plan to every batch, preserving group means.

    Each (batch, role) group is centered on its own column means before
    the batch's map is applied, then translated back, so QC and subject
    rows keep their pre-correction means exactly while second moments
    move toward the pooled covariance.  Metadata is untouched.
    """
    if plan.A.shape[1] != dataset.p:
        raise ContractViolationError(
            f"plan is dimensioned for p={plan.A.shape[1]}, dataset has "
            f"p={dataset.p}"
        )
    missing = [b for b in dataset.batches if b not in plan.batches]
    if missing:
        raise ContractViolationError(
            f"batches {missing} are present in the data but absent from "
            f"the plan"
        )
    out = np.array(dataset.values, dtype=float, copy=True)
    for label in dataset.batches:
        A = plan.matrix_for(label)
        for role in ("qc", "subject"):
            idx = dataset.indices(label, role)
            if idx.size == 0:
                continue
            out[idx] = _transform_group(out[idx], A)
    return dataset.with_values(out)


def variance_fold_change(
    before: BatchedDataset, after: BatchedDataset
) -> tuple[np.ndarray, float]:
    """Per-batch, per-variable subject-row variance ratios (after/before).

    Batches with fewer than two subject rows contribute a neutral row of
    ones, since no subject variance exists to protect there.
    """
    if before.values.shape != after.values.shape:
        raise ContractViolationError("datasets must share the same shape")
    if before.batch != after.batch or before.role != after.role:
        raise ContractViolationError("datasets must share the same metadata")
    labels = before.batches
    V = np.ones((len(labels), before.p))
    for j, label in enumerate(labels):
        pre = before.subject_values(label)
        post = after.subject_values(label)
        if pre.shape[0] < 2:
            continue
        V[j] = post.var(axis=0, ddof=1) / _pre_variances(pre)
    return V, float(V.mean())


def _corrected_qc_blocks(
    dataset: BatchedDataset, batches: tuple, A: np.ndarray
) -> list[np.ndarray]:
    blocks = []
    for j, label in enumerate(batches):
        rows = dataset.qc_values(label)
        blocks.append(_transform_group(rows, A[j]))
    return blocks


def _pairwise_cov_qvalues(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """BH-adjusted covariance-test q-matrix over autoscaled QC blocks."""
    pooled = autoscale(np.vstack(blocks))
    sizes = [b.shape[0] for b in blocks]
    bounds = np.cumsum([0] + sizes)
    scaled = [pooled[bounds[i]:bounds[i + 1]] for i in range(len(blocks))]
    B = len(blocks)
    pairs = [(i, k) for i in range(B) for k in range(i + 1, B)]
    pvals = np.array(
        [lc_cov_test(scaled[i], scaled[k]).p_value for i, k in pairs]
    )
    qvals = bh_fdr(pvals)
    q_matrix = np.ones((B, B))
    for (i, k), q in zip(pairs, qvals):
        q_matrix[i, k] = q_matrix[k, i] = q
    return q_matrix


def condition_one_qvalues(
    dataset: BatchedDataset, plan: CocoPlan
) -> np.ndarray:
    """Re-evaluate the feasibility condition for a plan on a dataset.

    Transforms the QC rows exactly as ``apply_coco`` does, then runs the
    pairwise covariance tests with BH adjustment.  The returned square
    q-matrix is ordered like ``dataset.batches``; a plan satisfies the
    condition when every off-diagonal entry is >= the significance level
    it was searched at.
    """
    missing = [b for b in dataset.batches if b not in plan.batches]
    if missing:
        raise ContractViolationError(
            f"batches {missing} are present in the data but absent from "
            f"the plan"
        )
    order = [plan.batches.index(b) for b in dataset.batches]
    A = plan.A[order]
    blocks = _corrected_qc_blocks(dataset, dataset.batches, A)
    return _pairwise_cov_qvalues(blocks)


def _subject_fold_changes(
    dataset: BatchedDataset, batches: tuple, A: np.ndarray
) -> np.ndarray:
    V = np.ones((len(batches), dataset.p))
    for j, label in enumerate(batches):
        rows = dataset.subject_values(label)
        if rows.shape[0] < 2:
            continue
        pre_var = _pre_variances(rows)
        post = _transform_group(rows, A[j])
        V[j] = post.var(axis=0, ddof=1) / pre_var
    return V


def coco_search(dataset: BatchedDataset, config: CocoConfig) -> CocoPlan:
    """Random-search the per-batch penalties and return the best plan.

    Draws ``n_search`` i.i.d. hyperparameter settings; for each, fits the
    penalized precision per batch on the QC rows (standardized jointly
    against the pooled QC column scales, centered per batch, MLE 1/n
    covariance), builds the batch maps, and keeps the candidates whose
    corrected QC rows show no significant pairwise covariance difference.
    Among those it returns the plan with the smallest mean subject-row
    variance fold change.  Candidates whose precision fit does not
    converge are treated as infeasible.

    Raises CocoInfeasibleError when no candidate passes; the error
    carries the closest-to-feasible evaluated candidate for diagnostics.
    """
    batches = dataset.batches
    if len(batches) < 2:
        raise ContractViolationError(
            "covariance correction needs at least 2 batches"
        )
    qc_counts = {b: dataset.qc_values(b).shape[0] for b in batches}
    thin = {b: c for b, c in qc_counts.items() if c < 3}
    if thin:
        raise ContractViolationError(
            f"every batch needs at least 3 QC samples, got {thin}"
        )
    p = dataset.p
    B = len(batches)

    # joint column scales from the pooled QC rows; the precision fits and
    # the identity target live in these standardized coordinates
    qc_all = dataset.qc_values()
    centers = qc_all.mean(axis=0)
    scales = (qc_all - centers).std(axis=0, ddof=1)
    dead = np.flatnonzero(scales == 0.0)
    if dead.size:
        raise DegenerateColumnError(dead)

    cov_inputs = []
    n_qc = []
    for label in batches:
        z = (dataset.qc_values(label) - centers) / scales
        z = z - z.mean(axis=0)
        cov_inputs.append(empirical_cov(z, denominator="n"))
        n_qc.append(qc_counts[label])
    targets = [config.target_for(j, p) for j in range(B)]

    a_lo, a_hi = config.alpha_range
    l_lo, l_hi = config.lambda_range

    best_plan = None
    best_mean_v = np.inf
    best_fail = None
    best_fail_q = -1.0
    u = 0

    for i in range(config.n_search):
        gen = config.rng.child(i).generator()
        alphas = gen.uniform(a_lo, a_hi, B)
        lambdas = gen.uniform(l_lo, l_hi, B)
        while not (lambdas > 0.0).all():
            redraw = lambdas <= 0.0
            lambdas[redraw] = gen.uniform(l_lo, l_hi, int(redraw.sum()))

        try:
            fits = [
                gelnet_estimate(
                    cov_inputs[j],
                    GelnetConfig(
                        alpha=alphas[j],
                        lam=lambdas[j],
                        target=targets[j],
                        tol=config.gelnet_tol,
                        max_iter=config.gelnet_max_iter,
                    ),
                )
                for j in range(B)
            ]
        except GelnetNonConvergenceError:
            continue

        try:
            sigma_hats = []
            for est in fits:
                inv = np.linalg.inv(est.theta.entries)
                sigma_hats.append(0.5 * (inv + inv.T))
            pooled = pooled_covariance(sigma_hats, n_qc)
            A = np.empty((B, p, p))
            for j in range(B):
                standardized = transformation_matrix(fits[j], pooled)
                # carry the map back to the dataset's own column scales
                A[j] = standardized * (scales[None, :] / scales[:, None])
        except NotPositiveDefiniteError:
            continue

        blocks = _corrected_qc_blocks(dataset, batches, A)
        try:
            q_matrix = _pairwise_cov_qvalues(blocks)
        except DegenerateColumnError:
            continue
        tri = q_matrix[np.triu_indices(B, k=1)]
        min_q = float(tri.min())

        if (tri >= config.alpha_sig).all():
            u += 1
            V = _subject_fold_changes(dataset, batches, A)
            mean_v = float(V.mean())
            if mean_v < best_mean_v:
                best_mean_v = mean_v
                best_plan = dict(
                    A=A, alphas=alphas, lambdas=lambdas, V=V, mean_V=mean_v
                )
        elif best_plan is None and min_q > best_fail_q:
            best_fail_q = min_q
            V = _subject_fold_changes(dataset, batches, A)
            best_fail = dict(
                A=A, alphas=alphas, lambdas=lambdas, V=V, mean_V=float(V.mean())
            )

    if best_plan is not None:
        return CocoPlan(
            batches=batches, candidates_passing=u, **best_plan
        )
    diagnostic = None
    if best_fail is not None:
        diagnostic = CocoPlan(
            batches=batches, candidates_passing=0, **best_fail
        )
    raise CocoInfeasibleError(
        f"no feasible hyperparameter setting among {config.n_search} "
        f"candidates (closest worst-pair q = "
        f"{best_fail_q if best_fail is not None else float('nan'):.4f}); "
        f"consider a different upstream correction or a larger search",
        diagnostic,
    )
