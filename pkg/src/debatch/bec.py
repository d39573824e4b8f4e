"""Prepositive batch-effect correction.

Two stages mirror the two flavors of batch effect.  Intra-batch drift is
removed per variable by a gradient-boosted tree regressor fitted on each
batch's QC rows against injection order plus the most correlated companion
variables; every row is then rescaled by reference/fitted so that the
fitted drift curve is divided out.  Inter-batch level differences are
removed by ratio scaling: each batch's QC median is mapped onto the
cross-batch mean of QC medians, variable by variable.

The boosted-tree inner loops are registered as compilable kernels.  They
are written with explicit loop reductions only, so the compiled and the
interpreted backend produce bit-for-bit identical models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from debatch._backend import register_kernel
from debatch.core import (
    BatchedDataset,
    ContractViolationError,
    DebatchError,
    DegenerateColumnError,
    RngStream,
)

__all__ = [
    "CorrectionModel",
    "PredictionFloorWarning",
    "RegressorSpec",
    "TreeEnsemble",
    "ZeroMedianError",
    "apply_intra",
    "fit_intra",
    "ratio_a_correct",
    "top_correlated",
]

# hyperparameter space searched by cross-validation; deliberately small
# because each fit sees only one batch's QC rows
_GRID = tuple(
    (nt, md, lr)
    for nt in (25, 50, 100)
    for md in (2, 3, 4)
    for lr in (0.05, 0.1, 0.3)
)
_N_RANDOM_GRID = 5

_FLOOR_FRACTION = 1e-3


class PredictionFloorWarning(UserWarning):
    """More than 1% of fitted drift values were floored before dividing."""


class ZeroMedianError(DegenerateColumnError):
    """A batch QC median of zero cannot anchor a ratio correction."""

    def __init__(self, batch: str, columns):
        self.batch = str(batch)
        self.columns = tuple(int(c) for c in columns)
        DebatchError.__init__(
            self,
            f"batch {self.batch!r} has a zero QC median at variable(s) "
            f"{list(self.columns)}",
        )


def _constant_floor(column: np.ndarray) -> float:
    # a literally constant column can come back with variance ~eps^2
    # from mean rounding; compare spreads against this relative floor
    return 64.0 * np.finfo(float).eps * max(1.0, float(np.abs(column).max()))


@register_kernel
def _gbt_fit_kernel(X, y, rows, max_depth, learning_rate):
    """Fit boosted depth-limited regression trees by squared loss.

    ``rows[t]`` lists the training-row indices tree ``t`` may split on;
    fitted values are still updated on every row so later trees see the
    full-sample residuals.  Trees are stored heap style: node ``i`` has
    children ``2i+1`` and ``2i+2``, and a split feature of -1 marks a
    leaf.  Reductions are explicit loops on purpose: both backends then
    execute the same additions in the same order.
    """
    n = X.shape[0]
    m = X.shape[1]
    n_trees = rows.shape[0]
    n_sub = rows.shape[1]
    n_nodes = (1 << (max_depth + 1)) - 1
    n_internal = (1 << max_depth) - 1

    feat = np.empty((n_trees, n_nodes), np.int64)
    thr = np.zeros((n_trees, n_nodes))
    val = np.zeros((n_trees, n_nodes))
    for t in range(n_trees):
        for node in range(n_nodes):
            feat[t, node] = -1

    s = 0.0
    for r in range(n):
        s += y[r]
    base = s / n

    pred = np.empty(n)
    for r in range(n):
        pred[r] = base

    resid = np.empty(n_sub)
    node_of = np.empty(n_sub, np.int64)
    members = np.empty(n_sub, np.int64)
    order = np.empty(n_sub, np.int64)

    for t in range(n_trees):
        for q in range(n_sub):
            resid[q] = y[rows[t, q]] - pred[rows[t, q]]
            node_of[q] = 0

        for node in range(n_internal):
            cnt = 0
            for q in range(n_sub):
                if node_of[q] == node:
                    members[cnt] = q
                    cnt += 1
            if cnt == 0:
                continue
            tot = 0.0
            for a in range(cnt):
                tot += resid[members[a]]
            if cnt < 2:
                val[t, node] = tot / cnt
                continue
            parent = tot * tot / cnt
            best = parent
            best_f = -1
            best_thr = 0.0
            for f in range(m):
                # insertion sort by (value, source row): a reproducible
                # order that no library sort gets to decide
                for a in range(cnt):
                    order[a] = members[a]
                for a in range(1, cnt):
                    key = order[a]
                    kv = X[rows[t, key], f]
                    kr = rows[t, key]
                    b = a - 1
                    while b >= 0:
                        ov = X[rows[t, order[b]], f]
                        if ov > kv or (ov == kv and rows[t, order[b]] > kr):
                            order[b + 1] = order[b]
                            b -= 1
                        else:
                            break
                    order[b + 1] = key
                sL = 0.0
                for e in range(cnt - 1):
                    sL += resid[order[e]]
                    ve = X[rows[t, order[e]], f]
                    vn = X[rows[t, order[e + 1]], f]
                    if ve < vn:
                        nL = e + 1
                        nR = cnt - nL
                        sR = tot - sL
                        score = sL * sL / nL + sR * sR / nR
                        if score > best:
                            best = score
                            best_f = f
                            best_thr = 0.5 * (ve + vn)
            if best_f < 0:
                val[t, node] = tot / cnt
                continue
            feat[t, node] = best_f
            thr[t, node] = best_thr
            for a in range(cnt):
                q = members[a]
                if X[rows[t, q], best_f] <= best_thr:
                    node_of[q] = 2 * node + 1
                else:
                    node_of[q] = 2 * node + 2

        for node in range(n_internal, n_nodes):
            s2 = 0.0
            c2 = 0
            for q in range(n_sub):
                if node_of[q] == node:
                    s2 += resid[q]
                    c2 += 1
            if c2 > 0:
                val[t, node] = s2 / c2

        for r in range(n):
            node = 0
            while feat[t, node] >= 0:
                if X[r, feat[t, node]] <= thr[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            pred[r] += learning_rate * val[t, node]

    return feat, thr, val, base


@register_kernel
def _gbt_predict_kernel(feat, thr, val, base, learning_rate, X):
    """Sum the ensemble's leaf values for every row of X."""
    n = X.shape[0]
    n_trees = feat.shape[0]
    out = np.empty(n)
    for r in range(n):
        acc = base
        for t in range(n_trees):
            node = 0
            while feat[t, node] >= 0:
                if X[r, feat[t, node]] <= thr[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            acc += learning_rate * val[t, node]
        out[r] = acc
    return out


@dataclass(frozen=True)
class RegressorSpec:
    """Settings for the per-(batch, variable) drift regressor.

    The explicit (n_trees, max_depth, learning_rate) triple is always a
    cross-validation candidate; a few more candidates are sampled from a
    fixed small grid.  ``n_correlated`` is the number of companion
    variables added to the injection order as features, capped at p-1.
    """

    rng: RngStream
    kind: str = "gbtree"
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 1.0
    n_correlated: int = 10
    cv_folds: int = 5

    def __post_init__(self):
        if not isinstance(self.rng, RngStream):
            raise ContractViolationError("rng must be an RngStream")
        if self.kind != "gbtree":
            raise ContractViolationError(
                f"kind must be 'gbtree', got {self.kind!r}"
            )
        if int(self.n_trees) < 1:
            raise ContractViolationError("n_trees must be at least 1")
        if int(self.max_depth) < 1:
            raise ContractViolationError("max_depth must be at least 1")
        lr = float(self.learning_rate)
        if not 0.0 < lr <= 1.0:
            raise ContractViolationError("learning_rate must lie in (0, 1]")
        sub = float(self.subsample)
        if not 0.0 < sub <= 1.0:
            raise ContractViolationError("subsample must lie in (0, 1]")
        if int(self.n_correlated) < 0:
            raise ContractViolationError("n_correlated must be >= 0")
        if int(self.cv_folds) < 2:
            raise ContractViolationError("cv_folds must be at least 2")
        object.__setattr__(self, "n_trees", int(self.n_trees))
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "learning_rate", lr)
        object.__setattr__(self, "subsample", sub)
        object.__setattr__(self, "n_correlated", int(self.n_correlated))
        object.__setattr__(self, "cv_folds", int(self.cv_folds))


@dataclass(frozen=True)
class TreeEnsemble:
    """One fitted boosted-tree regressor in flat heap-array form.

    ``correlated`` lists the variable indices whose intensities follow the
    injection order in the feature matrix.  ``hyper`` records the
    (n_trees, max_depth, learning_rate) triple chosen by cross-validation
    and ``cv_mse`` its held-out mean squared error.
    """

    split_features: np.ndarray
    split_thresholds: np.ndarray
    leaf_values: np.ndarray
    base: float
    learning_rate: float
    correlated: np.ndarray
    hyper: tuple
    cv_mse: float

    def __post_init__(self):
        for name in ("split_features", "split_thresholds", "leaf_values",
                     "correlated"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.split_features.shape != self.split_thresholds.shape or \
                self.split_features.shape != self.leaf_values.shape:
            raise ContractViolationError(
                "tree arrays must share one (n_trees, n_nodes) shape"
            )

    def predict(self, orders, rows) -> np.ndarray:
        """Fitted drift value for rows with the given injection orders."""
        X = _features(np.asarray(orders, dtype=float),
                      np.asarray(rows, dtype=float), self.correlated)
        return _gbt_predict_kernel(
            self.split_features, self.split_thresholds, self.leaf_values,
            float(self.base), float(self.learning_rate), X,
        )


@dataclass(frozen=True)
class CorrectionModel:
    """Per-(batch, variable) drift regressors plus reference levels.

    ``reference_levels[i]`` is the median of variable i over the QC rows
    of every batch; corrections rescale toward it.
    """

    batches: tuple
    reference_levels: np.ndarray
    fits: Mapping = field(repr=False)

    def __post_init__(self):
        ref = np.asarray(self.reference_levels, dtype=float)
        if ref.ndim != 1:
            raise ContractViolationError("reference_levels must be a vector")
        if not np.isfinite(ref).all():
            raise ContractViolationError("reference_levels must be finite")
        ref.flags.writeable = False
        object.__setattr__(self, "reference_levels", ref)
        object.__setattr__(self, "batches", tuple(self.batches))
        for key in self.fits:
            batch, i = key
            if batch not in self.batches or not 0 <= i < ref.size:
                raise ContractViolationError(
                    f"fit key {key!r} does not match the model's batches "
                    f"and variable count"
                )

    @property
    def p(self) -> int:
        return self.reference_levels.size

    def fit_for(self, batch, i) -> TreeEnsemble:
        try:
            return self.fits[(batch, int(i))]
        except KeyError:
            raise ContractViolationError(
                f"no fitted regressor for batch {batch!r}, variable {i}"
            ) from None

    def to_report(self) -> dict:
        """Audit summary: chosen hyperparameters and CV losses per fit."""
        fits = {}
        for label in self.batches:
            per_batch = {}
            for i in range(self.p):
                ens = self.fits.get((label, i))
                if ens is None:
                    continue
                per_batch[str(i)] = {
                    "n_trees": int(ens.hyper[0]),
                    "max_depth": int(ens.hyper[1]),
                    "learning_rate": float(ens.hyper[2]),
                    "cv_mse": float(ens.cv_mse),
                }
            fits[label] = per_batch
        return {
            "batches": list(self.batches),
            "reference_levels": [float(v) for v in self.reference_levels],
            "fits": fits,
        }


def top_correlated(X_qc, i, k) -> np.ndarray:
    """Indices of the k variables most correlated with variable i.

    Magnitude of the Pearson correlation over the given QC rows decides;
    ties resolve toward the lower index, and variables that are constant
    over these rows count as uncorrelated.
    """
    arr = np.asarray(X_qc, dtype=float)
    if arr.ndim != 2:
        raise ContractViolationError("X_qc must be a 2-D matrix")
    n, p = arr.shape
    if n < 3:
        raise ContractViolationError("needs at least 3 QC rows")
    i = int(i)
    if not 0 <= i < p:
        raise ContractViolationError(f"variable index {i} out of range")
    k = int(k)
    if not 1 <= k < p:
        raise ContractViolationError("k must satisfy 1 <= k < p")
    centered = arr - arr.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    if norms[i] <= _constant_floor(arr[:, i]):
        raise DegenerateColumnError([i])
    safe = norms.copy()
    dead = np.array([
        norms[j] <= _constant_floor(arr[:, j]) for j in range(p)
    ])
    safe[dead] = 1.0
    corr = centered.T @ centered[:, i] / (safe * norms[i])
    corr[dead] = 0.0
    mag = np.abs(corr)
    mag[i] = -np.inf
    ranked = np.argsort(-mag, kind="stable")
    return ranked[:k].astype(np.int64)


def _features(orders: np.ndarray, rows: np.ndarray,
              correlated: np.ndarray) -> np.ndarray:
    cols = [np.asarray(orders, dtype=float)]
    if correlated.size:
        cols.append(rows[:, correlated].T)
    return np.ascontiguousarray(np.vstack(cols).T)


def _subsample_rows(n: int, n_trees: int, subsample: float, gen) -> np.ndarray:
    if subsample >= 1.0:
        return np.tile(np.arange(n, dtype=np.int64), (n_trees, 1))
    n_sub = max(1, int(round(subsample * n)))
    rows = np.empty((n_trees, n_sub), dtype=np.int64)
    for t in range(n_trees):
        rows[t] = np.sort(gen.choice(n, size=n_sub, replace=False))
    return rows


def _fit_arrays(X, y, n_trees, max_depth, learning_rate, subsample, gen):
    rows = _subsample_rows(X.shape[0], n_trees, subsample, gen)
    return _gbt_fit_kernel(
        np.ascontiguousarray(X, dtype=float),
        np.ascontiguousarray(y, dtype=float),
        rows, int(max_depth), float(learning_rate),
    )


def _cv_mse(X, y, combo, subsample, folds, gen) -> float:
    n_trees, max_depth, lr = combo
    n = X.shape[0]
    sq_err = 0.0
    for fold in folds:
        train = np.setdiff1d(np.arange(n), fold)
        feat, thr, val, base = _fit_arrays(
            X[train], y[train], n_trees, max_depth, lr, subsample, gen
        )
        pred = _gbt_predict_kernel(feat, thr, val, base, float(lr), X[fold])
        sq_err += float(((pred - y[fold]) ** 2).sum())
    return sq_err / n


def _constant_ensemble(level: float, spec: RegressorSpec) -> TreeEnsemble:
    return TreeEnsemble(
        split_features=np.full((0, 1), -1, dtype=np.int64),
        split_thresholds=np.zeros((0, 1)),
        leaf_values=np.zeros((0, 1)),
        base=float(level),
        learning_rate=spec.learning_rate,
        correlated=np.empty(0, dtype=np.int64),
        hyper=(spec.n_trees, spec.max_depth, spec.learning_rate),
        cv_mse=0.0,
    )


def _fit_variable(orders, qc_rows, i, k, spec, gen) -> TreeEnsemble:
    y = qc_rows[:, i]
    if y.std() <= _constant_floor(y):
        # a constant target needs no regressor at all
        return _constant_ensemble(y.mean(), spec)
    if k > 0:
        correlated = top_correlated(qc_rows, i, k)
    else:
        correlated = np.empty(0, dtype=np.int64)
    X = _features(orders, qc_rows, correlated)

    own = (spec.n_trees, spec.max_depth, spec.learning_rate)
    picks = gen.choice(
        len(_GRID), size=min(_N_RANDOM_GRID, len(_GRID)), replace=False
    )
    combos = [own] + [
        _GRID[int(j)] for j in picks if _GRID[int(j)] != own
    ]
    perm = gen.permutation(X.shape[0])
    folds = np.array_split(perm, spec.cv_folds)

    best_combo = None
    best_mse = np.inf
    for combo in combos:
        mse = _cv_mse(X, y, combo, spec.subsample, folds, gen)
        if mse < best_mse:
            best_mse = mse
            best_combo = combo

    feat, thr, val, base = _fit_arrays(
        X, y, best_combo[0], best_combo[1], best_combo[2],
        spec.subsample, gen,
    )
    return TreeEnsemble(
        split_features=feat, split_thresholds=thr, leaf_values=val,
        base=float(base), learning_rate=float(best_combo[2]),
        correlated=correlated, hyper=best_combo, cv_mse=float(best_mse),
    )


def fit_intra(dataset: BatchedDataset, spec: RegressorSpec) -> CorrectionModel:
    """Fit one drift regressor per (batch, variable) on QC rows.

    Batches are fitted in isolation from fixed per-fit substreams, so
    editing one batch's rows can never change another batch's model and
    fits may be computed in any order.
    """
    p = dataset.p
    k = min(spec.n_correlated, p - 1)
    need = max(5, spec.cv_folds)
    for label in dataset.batches:
        n_qc = dataset.qc_values(label).shape[0]
        if n_qc < need:
            raise ContractViolationError(
                f"batch {label!r} has {n_qc} QC rows; fitting needs at "
                f"least {need}"
            )
    reference = np.median(dataset.qc_values(), axis=0)
    zero = np.flatnonzero(reference == 0.0)
    if zero.size:
        raise DegenerateColumnError(zero)

    fits = {}
    for b_idx, label in enumerate(dataset.batches):
        qc_idx = dataset.indices(label, "qc")
        orders = dataset.injection_order[qc_idx].astype(float)
        qc_rows = dataset.values[qc_idx]
        for i in range(p):
            gen = spec.rng.child(b_idx * p + i).generator()
            fits[(label, i)] = _fit_variable(
                orders, qc_rows, i, k, spec, gen
            )
    return CorrectionModel(
        batches=dataset.batches, reference_levels=reference, fits=fits
    )


def apply_intra(dataset: BatchedDataset,
                model: CorrectionModel) -> BatchedDataset:
    """Divide out each row's fitted drift: raw * reference / fitted.

    Predictions use the row's own injection order and companion-variable
    intensities, for QC and subject rows alike.  Fitted values are floored
    at a small fraction of the reference level before dividing; if the
    floor fires on more than 1% of predictions the result carries a
    PredictionFloorWarning.
    """
    if dataset.p != model.p:
        raise ContractViolationError(
            f"model is dimensioned for p={model.p}, dataset has "
            f"p={dataset.p}"
        )
    missing = [b for b in dataset.batches if b not in model.batches]
    if missing:
        raise ContractViolationError(
            f"batches {missing} have no fitted models"
        )
    out = np.array(dataset.values, dtype=float, copy=True)
    floored = 0
    for label in dataset.batches:
        idx = dataset.indices(label)
        orders = dataset.injection_order[idx].astype(float)
        rows = dataset.values[idx]
        for i in range(dataset.p):
            ens = model.fit_for(label, i)
            fitted = ens.predict(orders, rows)
            floor = _FLOOR_FRACTION * model.reference_levels[i]
            low = fitted < floor
            floored += int(low.sum())
            fitted = np.where(low, floor, fitted)
            out[idx, i] = rows[:, i] * (model.reference_levels[i] / fitted)
    if floored > 0.01 * out.size:
        warnings.warn(
            PredictionFloorWarning(
                f"{floored} of {out.size} fitted values were floored; the "
                f"drift fits are running far below the reference levels"
            )
        )
    return dataset.with_values(out)


def ratio_a_correct(dataset: BatchedDataset) -> BatchedDataset:
    """Align batches on QC medians: scale toward their cross-batch mean.

    For variable i and batch j the factor is
    mean_over_batches(median(QC_i)) / median(QC_i in batch j), applied to
    every row of batch j.  Afterwards all per-batch QC medians of a
    variable equal the cross-batch mean of the originals.
    """
    labels = dataset.batches
    medians = np.empty((len(labels), dataset.p))
    for j, label in enumerate(labels):
        medians[j] = np.median(dataset.qc_values(label), axis=0)
        zero = np.flatnonzero(medians[j] == 0.0)
        if zero.size:
            raise ZeroMedianError(label, zero)
    reference = medians.mean(axis=0)
    out = np.array(dataset.values, dtype=float, copy=True)
    for j, label in enumerate(labels):
        out[dataset.indices(label)] *= reference / medians[j]
    return dataset.with_values(out)
