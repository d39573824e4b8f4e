"""Correction-assessment metrics.

Everything here summarizes one dataset from the QC point of view: the
relative standard deviation of each variable over the pooled QC rows, the
dispersion ratio comparing QC spread against subject spread, and
cumulative-frequency rollups of either against fixed cutoffs.  All values
are kept as fractions internally and only formatted as percentages at the
reporting boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from debatch.core import (
    BatchedDataset,
    ContractViolationError,
    DegenerateColumnError,
)

__all__ = [
    "MetricTable",
    "cumulative_frequency",
    "d_ratio",
    "metric_table",
    "rsd",
]

RSD_THRESHOLDS = (0.15, 0.20, 0.30)
D_RATIO_THRESHOLD = 0.5


def _mean_floor(rows: np.ndarray) -> np.ndarray:
    # a mean this close to zero (relative to the column magnitude) makes
    # the ratio meaningless rather than merely large
    return 64.0 * np.finfo(float).eps * np.maximum(
        1.0, np.abs(rows).max(axis=0)
    )


def rsd(dataset: BatchedDataset) -> np.ndarray:
    """Per-variable relative standard deviation of the pooled QC rows.

    Sample standard deviation (n-1 form) divided by the mean, as a
    fraction; multiply by 100 for the conventional percent form.
    """
    qc = dataset.qc_values()
    means = qc.mean(axis=0)
    dead = np.flatnonzero(np.abs(means) <= _mean_floor(qc))
    if dead.size:
        raise DegenerateColumnError(dead)
    return qc.std(axis=0, ddof=1) / means


def _per_batch_rsd(dataset: BatchedDataset) -> dict:
    out = {}
    for label in dataset.batches:
        qc = dataset.qc_values(label)
        means = qc.mean(axis=0)
        dead = np.flatnonzero(np.abs(means) <= _mean_floor(qc))
        if dead.size:
            raise DegenerateColumnError(dead)
        out[label] = qc.std(axis=0, ddof=1) / means
    return out


def d_ratio(dataset: BatchedDataset) -> np.ndarray:
    """Per-variable dispersion ratio sqrt(VarQC / (VarQC + VarSubject)).

    QC rows and subject rows are each pooled across batches.  Values lie
    in [0, 1]; below 0.5 is the conventional acceptance region.
    """
    qc = dataset.qc_values()
    ss = dataset.subject_values()
    if ss.shape[0] < 2:
        raise ContractViolationError(
            "the dispersion ratio needs at least 2 subject rows"
        )
    var_qc = qc.var(axis=0, ddof=1)
    var_ss = ss.var(axis=0, ddof=1)
    scale = np.maximum(
        1.0, np.maximum(np.abs(qc).max(axis=0), np.abs(ss).max(axis=0))
    )
    floor = (64.0 * np.finfo(float).eps * scale) ** 2
    dead = np.flatnonzero(var_qc + var_ss <= floor)
    if dead.size:
        raise DegenerateColumnError(dead)
    return np.sqrt(var_qc / (var_qc + var_ss))


def cumulative_frequency(values, thresholds) -> np.ndarray:
    """Percent of values strictly below each threshold.

    Thresholds must come sorted ascending, which makes the result
    non-decreasing by construction.
    """
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        raise ContractViolationError("values must be non-empty")
    cuts = np.asarray(thresholds, dtype=float).ravel()
    if cuts.size == 0:
        raise ContractViolationError("at least one threshold is required")
    if (np.diff(cuts) < 0).any():
        raise ContractViolationError("thresholds must be sorted ascending")
    return np.array([100.0 * (vals < t).sum() / vals.size for t in cuts])


@dataclass(frozen=True)
class MetricTable:
    """Per-variable RSD and D-ratio with cumulative-frequency rollups.

    ``rsd_cf`` holds the percent of variables whose RSD falls below each
    entry of ``rsd_thresholds``; ``d_ratio_cf`` is the percent below the
    single D-ratio cutoff.  ``per_batch_rsd`` is a diagnostic breakdown
    keyed by batch label.
    """

    rsd: np.ndarray
    d_ratio: np.ndarray
    rsd_thresholds: tuple = RSD_THRESHOLDS
    d_ratio_threshold: float = D_RATIO_THRESHOLD
    rsd_cf: np.ndarray = None
    d_ratio_cf: float = None
    per_batch_rsd: Mapping = field(default_factory=dict, repr=False)

    def __post_init__(self):
        r = np.asarray(self.rsd, dtype=float)
        d = np.asarray(self.d_ratio, dtype=float)
        if r.shape != d.shape or r.ndim != 1:
            raise ContractViolationError(
                "rsd and d_ratio must be equal-length vectors"
            )
        if ((d < 0.0) | (d > 1.0)).any():
            raise ContractViolationError("d_ratio values must lie in [0, 1]")
        cuts = tuple(float(t) for t in self.rsd_thresholds)
        if (np.diff(cuts) < 0).any():
            raise ContractViolationError("thresholds must be sorted ascending")
        rsd_cf = (
            cumulative_frequency(r, cuts)
            if self.rsd_cf is None
            else np.asarray(self.rsd_cf, dtype=float)
        )
        if (np.diff(rsd_cf) < 0).any():
            raise ContractViolationError(
                "cumulative frequencies must be non-decreasing"
            )
        d_cf = (
            float(cumulative_frequency(d, (self.d_ratio_threshold,))[0])
            if self.d_ratio_cf is None
            else float(self.d_ratio_cf)
        )
        for name, arr in (("rsd", r), ("d_ratio", d), ("rsd_cf", rsd_cf)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "rsd_thresholds", cuts)
        object.__setattr__(self, "d_ratio_cf", d_cf)
        object.__setattr__(self, "per_batch_rsd", dict(self.per_batch_rsd))

    @property
    def median_rsd(self) -> float:
        return float(np.median(self.rsd))

    @property
    def d_ratio_pass(self) -> np.ndarray:
        """Per-variable acceptance flags: D-ratio below the cutoff."""
        return self.d_ratio < self.d_ratio_threshold

    def to_report(self) -> dict:
        """JSON-ready summary in conventional percent units."""
        return {
            "rsd_percent": [round(100.0 * v, 6) for v in self.rsd],
            "d_ratio_percent": [round(100.0 * v, 6) for v in self.d_ratio],
            "median_rsd_percent": round(100.0 * self.median_rsd, 6),
            "rsd_thresholds_percent": [
                round(100.0 * t, 6) for t in self.rsd_thresholds
            ],
            "cf_rsd_percent": [round(float(v), 6) for v in self.rsd_cf],
            "d_ratio_threshold_percent": round(
                100.0 * self.d_ratio_threshold, 6
            ),
            "cf_d_ratio_percent": round(float(self.d_ratio_cf), 6),
            "per_batch_median_rsd_percent": {
                label: round(100.0 * float(np.median(v)), 6)
                for label, v in self.per_batch_rsd.items()
            },
        }


def metric_table(
    dataset: BatchedDataset,
    rsd_thresholds: tuple = RSD_THRESHOLDS,
    d_ratio_threshold: float = D_RATIO_THRESHOLD,
) -> MetricTable:
    """All assessment metrics for one dataset in a single table."""
    return MetricTable(
        rsd=rsd(dataset),
        d_ratio=d_ratio(dataset),
        rsd_thresholds=tuple(rsd_thresholds),
        d_ratio_threshold=float(d_ratio_threshold),
        per_batch_rsd=_per_batch_rsd(dataset),
    )
