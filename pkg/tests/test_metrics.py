"""Assessment-metric tests built on hand arithmetic and draw oracles."""

import numpy as np
import pytest

from debatch.core import (
    BatchedDataset,
    ContractViolationError,
    DegenerateColumnError,
)
from debatch.metrics import (
    MetricTable,
    cumulative_frequency,
    d_ratio,
    metric_table,
    rsd,
)


def tiny_dataset(qc_cols, ss_cols):
    """Stack explicit per-variable QC and subject columns into a dataset."""
    qc = np.column_stack(qc_cols).astype(float)
    ss = np.column_stack(ss_cols).astype(float)
    n_qc, n_ss = qc.shape[0], ss.shape[0]
    n = n_qc + n_ss
    return BatchedDataset(
        np.vstack([qc, ss]), tuple(f"r{i}" for i in range(n)),
        ("b",) * n, ("qc",) * n_qc + ("subject",) * n_ss,
        np.arange(1, n + 1),
    )


class TestRsd:
    def test_hand_arithmetic(self):
        ds = tiny_dataset([[98.0, 100.0, 102.0]], [[1.0, 2.0]])
        assert rsd(ds)[0] == pytest.approx(0.02)

    def test_constant_qc_gives_zero(self):
        ds = tiny_dataset([[100.0, 100.0, 100.0]], [[1.0, 2.0]])
        assert rsd(ds)[0] == 0.0

    def test_pooled_across_batches(self):
        X = np.array([[98.0], [100.0], [102.0], [104.0]])
        ds = BatchedDataset(
            X, ("a1", "a2", "b1", "b2"), ("A", "A", "B", "B"),
            ("qc",) * 4, np.array([1, 2, 1, 2]),
        )
        pooled = X[:, 0]
        assert rsd(ds)[0] == pytest.approx(
            pooled.std(ddof=1) / pooled.mean()
        )

    def test_zero_mean_rejected(self):
        ds = tiny_dataset([[-1.0, 0.0, 1.0]], [[1.0, 2.0]])
        with pytest.raises(DegenerateColumnError):
            rsd(ds)

    def test_generator_promise_concentrates_below_30_percent(self):
        # means U(0,1) with spreads up to 30% of the mean: the population
        # ratio stays below 0.3 and the empirical one concentrates there
        gen = np.random.default_rng(77)
        p, n = 50, 5000
        mu = gen.uniform(0.0, 1.0, p)
        sigma = gen.uniform(0.0, 0.3 * mu)
        X = mu + gen.standard_normal((n, p)) * sigma
        ds = BatchedDataset(
            X, tuple(f"r{i}" for i in range(n)), ("b",) * n,
            ("qc",) * n, np.arange(1, n + 1),
        )
        emp = rsd(ds)
        assert (sigma / mu < 0.3).all()
        assert np.abs(emp - sigma / mu).max() < 0.01
        assert (emp < 0.31).all()


class TestDRatio:
    def test_equal_variances(self):
        ds = tiny_dataset([[99.0, 101.0]], [[199.0, 201.0]])
        assert d_ratio(ds)[0] == pytest.approx(np.sqrt(0.5))

    def test_constant_qc_gives_zero(self):
        ds = tiny_dataset([[5.0, 5.0]], [[1.0, 4.0]])
        assert d_ratio(ds)[0] == 0.0

    def test_one_to_ninetynine_split(self):
        qc = [99.0, 100.0, 101.0]                  # variance 1
        d = np.sqrt(99.0 * 2.0)
        ss = [50.0, 50.0 + d]                      # variance 99
        assert d_ratio(tiny_dataset([qc], [ss]))[0] == pytest.approx(
            0.1, rel=1e-12
        )

    def test_bounds(self):
        gen = np.random.default_rng(3)
        ds = tiny_dataset(
            [gen.normal(10, 2, 8) for _ in range(4)],
            [gen.normal(10, 5, 6) for _ in range(4)],
        )
        vals = d_ratio(ds)
        assert ((vals >= 0.0) & (vals <= 1.0)).all()

    def test_both_variances_zero_rejected(self):
        ds = tiny_dataset([[7.0, 7.0]], [[7.0, 7.0]])
        with pytest.raises(DegenerateColumnError):
            d_ratio(ds)

    def test_needs_subject_rows(self):
        qc = np.array([[1.0], [2.0], [3.0]])
        ds = BatchedDataset(
            qc, ("a", "b", "c"), ("x",) * 3, ("qc",) * 3,
            np.arange(1, 4),
        )
        with pytest.raises(ContractViolationError, match="subject"):
            d_ratio(ds)


class TestCumulativeFrequency:
    def test_counting_oracle(self):
        out = cumulative_frequency((0.10, 0.18, 0.40), (0.15, 0.20, 0.30))
        assert out == pytest.approx([100 / 3, 200 / 3, 200 / 3])

    def test_all_below_smallest(self):
        out = cumulative_frequency((0.01, 0.02), (0.15, 0.20, 0.30))
        assert out.tolist() == [100.0, 100.0, 100.0]

    def test_strictly_below(self):
        assert cumulative_frequency((0.15,), (0.15,))[0] == 0.0

    def test_monotone_and_saturates(self):
        gen = np.random.default_rng(5)
        vals = gen.uniform(0, 1, 40)
        cuts = np.sort(gen.uniform(0, 1.5, 6))
        out = cumulative_frequency(vals, cuts)
        assert (np.diff(out) >= 0).all()
        assert cumulative_frequency(vals, (np.inf,))[0] == 100.0

    def test_empty_values_rejected(self):
        with pytest.raises(ContractViolationError):
            cumulative_frequency((), (0.5,))

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ContractViolationError):
            cumulative_frequency((0.1,), (0.3, 0.2))


class TestMetricTable:
    def make(self, seed=9):
        gen = np.random.default_rng(seed)
        return tiny_dataset(
            [gen.normal(100, s, 10) for s in (2, 5, 40)],
            [gen.normal(100, s, 12) for s in (10, 10, 10)],
        )

    def test_table_matches_components(self):
        ds = self.make()
        table = metric_table(ds)
        assert np.array_equal(table.rsd, rsd(ds))
        assert np.array_equal(table.d_ratio, d_ratio(ds))
        assert table.rsd_cf == pytest.approx(
            cumulative_frequency(table.rsd, table.rsd_thresholds)
        )
        assert table.d_ratio_cf == pytest.approx(
            cumulative_frequency(table.d_ratio, (0.5,))[0]
        )
        assert set(table.per_batch_rsd) == set(ds.batches)

    def test_scale_invariance(self):
        ds = self.make()
        scaled_vals = np.array(ds.values, copy=True)
        scaled_vals[:, 1] *= 37.5
        scaled = ds.with_values(scaled_vals)
        assert rsd(scaled) == pytest.approx(rsd(ds), rel=1e-12)
        assert d_ratio(scaled) == pytest.approx(d_ratio(ds), rel=1e-12)

    def test_report_format(self):
        table = metric_table(self.make())
        report = table.to_report()
        assert report["rsd_thresholds_percent"] == [15.0, 20.0, 30.0]
        assert len(report["rsd_percent"]) == 3
        assert report["median_rsd_percent"] == pytest.approx(
            100 * table.median_rsd, abs=1e-5
        )
        cf = report["cf_rsd_percent"]
        assert cf == sorted(cf)

    def test_pass_flags(self):
        table = MetricTable(
            rsd=np.array([0.1, 0.2]), d_ratio=np.array([0.3, 0.7])
        )
        assert table.d_ratio_pass.tolist() == [True, False]

    def test_validation(self):
        with pytest.raises(ContractViolationError, match="\\[0, 1\\]"):
            MetricTable(rsd=np.array([0.1]), d_ratio=np.array([1.2]))
        with pytest.raises(ContractViolationError, match="ascending"):
            MetricTable(
                rsd=np.array([0.1]), d_ratio=np.array([0.5]),
                rsd_thresholds=(0.3, 0.2),
            )
