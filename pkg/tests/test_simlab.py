import json

import numpy as np
import pytest

from debatch.core import ContractViolationError, RngStream
from debatch.simlab import (
    MonteCarloResult,
    ScenarioSpec,
    empirical_rate,
    format_table,
    gen_population_pair,
    standard_scenario,
)


def spec_for(scenario, n1=10, n2=10, p=50, reps=5, seed=1, **kw):
    return standard_scenario(scenario, n1, n2, p, reps, RngStream(seed), **kw)


class TestScenarioSpec:
    def test_standard_scenarios_construct(self):
        for name in ("H0", "Hm", "Hc", "HmHc"):
            s = spec_for(name)
            assert s.scenario == name
            assert s.alpha_sig == 0.05

    def test_standard_parameter_values(self):
        s = spec_for("HmHc")
        assert (s.pct, s.eta, s.rho1, s.rho2) == (0.05, 0.3, 0.3, -0.3)
        s = spec_for("Hm")
        assert (s.pct, s.eta, s.rho1, s.rho2) == (0.05, 0.3, 0.0, 0.0)

    def test_null_forbids_any_shift(self):
        with pytest.raises(ContractViolationError, match="pct = eta = 0"):
            ScenarioSpec("H0", 10, 10, 50, 5, RngStream(1), pct=0.05, eta=0.3)
        with pytest.raises(ContractViolationError, match="rho1 = rho2 = 0"):
            ScenarioSpec("H0", 10, 10, 50, 5, RngStream(1), rho1=0.3, rho2=0.3)

    def test_mean_scenario_needs_mean_shift_only(self):
        with pytest.raises(ContractViolationError, match="do not produce"):
            ScenarioSpec("Hm", 10, 10, 50, 5, RngStream(1), pct=0.0, eta=0.3)
        with pytest.raises(ContractViolationError, match="do not produce"):
            ScenarioSpec(
                "Hm", 10, 10, 50, 5, RngStream(1),
                pct=0.05, eta=0.3, rho1=0.3, rho2=-0.3,
            )

    def test_cov_scenario_needs_distinct_rhos(self):
        with pytest.raises(ContractViolationError, match="do not produce"):
            ScenarioSpec("Hc", 10, 10, 50, 5, RngStream(1), rho1=0.3, rho2=0.3)
        with pytest.raises(ContractViolationError, match="pct = eta = 0"):
            ScenarioSpec(
                "Hc", 10, 10, 50, 5, RngStream(1),
                pct=0.05, eta=0.3, rho1=0.3, rho2=-0.3,
            )

    def test_joint_scenario_needs_both(self):
        with pytest.raises(ContractViolationError, match="do not produce"):
            ScenarioSpec(
                "HmHc", 10, 10, 50, 5, RngStream(1),
                pct=0.05, eta=0.3, rho1=0.3, rho2=0.3,
            )

    def test_parameter_ranges(self):
        with pytest.raises(ContractViolationError, match="scenario"):
            ScenarioSpec("H1", 10, 10, 50, 5, RngStream(1))
        with pytest.raises(ContractViolationError, match="pct"):
            ScenarioSpec("Hm", 10, 10, 50, 5, RngStream(1), pct=1.5, eta=0.3)
        with pytest.raises(ContractViolationError, match="eta"):
            ScenarioSpec("Hm", 10, 10, 50, 5, RngStream(1), pct=0.05, eta=-1.0)
        with pytest.raises(ContractViolationError, match="rho1"):
            ScenarioSpec("Hc", 10, 10, 50, 5, RngStream(1), rho1=1.0, rho2=0.3)
        with pytest.raises(ContractViolationError, match="n1"):
            ScenarioSpec("H0", 1, 10, 50, 5, RngStream(1))
        with pytest.raises(ContractViolationError, match="p"):
            ScenarioSpec("H0", 10, 10, 1, 5, RngStream(1))
        with pytest.raises(ContractViolationError, match="reps"):
            ScenarioSpec("H0", 10, 10, 50, 0, RngStream(1))
        with pytest.raises(ContractViolationError, match="alpha_sig"):
            ScenarioSpec("H0", 10, 10, 50, 5, RngStream(1), alpha_sig=1.0)
        with pytest.raises(ContractViolationError, match="RngStream"):
            ScenarioSpec("H0", 10, 10, 50, 5, np.random.default_rng(1))

    def test_standard_scenario_rejects_unknown_name(self):
        with pytest.raises(ContractViolationError, match="scenario"):
            standard_scenario("Hx", 10, 10, 50, 5, RngStream(1))


class TestGenPopulationPair:
    def test_null_populations_identical(self):
        mu1, mu2, S1, S2 = gen_population_pair(spec_for("H0", seed=1))
        assert np.array_equal(mu1, mu2)
        assert np.array_equal(S1, S2)
        assert np.array_equal(S1, np.diag(np.diag(S1)))

    def test_means_sorted_descending(self):
        mu1, _, _, _ = gen_population_pair(spec_for("H0", p=200, seed=2))
        assert np.all(np.diff(mu1) < 0)
        assert np.all((mu1 > 0) & (mu1 < 1))

    def test_spread_bounded_by_mean(self):
        mu1, _, S1, _ = gen_population_pair(spec_for("H0", p=200, seed=3))
        sd = np.sqrt(np.diag(S1))
        assert np.all(sd <= 0.3 * mu1)
        assert np.all(sd > 0)

    def test_mean_shift_hits_exactly_the_top_coordinates(self):
        mu1, mu2, S1, S2 = gen_population_pair(spec_for("Hm", p=100, seed=4))
        moved = mu2 - mu1
        assert np.count_nonzero(moved) == 5
        assert np.all(moved[:5] == pytest.approx(np.sqrt(0.03), abs=1e-12))
        assert np.array_equal(S1, S2)

    def test_shift_count_floors_at_one(self):
        # floor(0.05 * 10) = 0 rounds up to a single coordinate
        mu1, mu2, _, _ = gen_population_pair(spec_for("Hm", p=10, seed=5))
        assert np.count_nonzero(mu2 - mu1) == 1

    def test_cov_shift_flips_correlation_sign(self):
        _, _, S1, S2 = gen_population_pair(spec_for("Hc", p=50, seed=6))
        sd = np.sqrt(np.diag(S1))
        assert S1[0, 1] == pytest.approx(0.3 * sd[0] * sd[1], rel=1e-12)
        assert S2[0, 1] == pytest.approx(-0.3 * sd[0] * sd[1], rel=1e-12)
        assert np.array_equal(np.diag(S1), np.diag(S2))

    def test_correlation_decays_geometrically(self):
        _, _, S1, _ = gen_population_pair(spec_for("Hc", p=50, seed=7))
        sd = np.sqrt(np.diag(S1))
        assert S1[0, 2] == pytest.approx(0.09 * sd[0] * sd[2], rel=1e-12)
        assert S1[3, 7] == pytest.approx(0.3 ** 4 * sd[3] * sd[7], rel=1e-12)

    def test_cov_scenario_means_identical(self):
        mu1, mu2, _, _ = gen_population_pair(spec_for("Hc", seed=8))
        assert np.array_equal(mu1, mu2)

    def test_joint_scenario_shifts_both(self):
        mu1, mu2, S1, S2 = gen_population_pair(spec_for("HmHc", p=100, seed=9))
        assert np.count_nonzero(mu2 - mu1) == 5
        assert S1[0, 1] > 0 > S2[0, 1]

    def test_deterministic_given_stream(self):
        a = gen_population_pair(spec_for("HmHc", seed=10))
        b = gen_population_pair(spec_for("HmHc", seed=10))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestEmpiricalRate:
    def test_null_size_in_band(self):
        r = empirical_rate(spec_for("H0", p=50, reps=200, seed=21), "yu_fisher")
        assert 0.015 <= r.rejection_rate <= 0.10
        assert 0.01 <= r.breakdown["mean_component"] <= 0.12
        assert 0.01 <= r.breakdown["cov_component"] <= 0.12

    def test_null_size_other_simultaneous_methods(self):
        r = empirical_rate(spec_for("H0", p=50, reps=150, seed=27), "hn")
        assert 0.01 <= r.rejection_rate <= 0.13
        r = empirical_rate(spec_for("H0", p=50, reps=150, seed=28), "yu_cauchy")
        assert 0.01 <= r.rejection_rate <= 0.12

    def test_mean_test_detects_mean_shift(self):
        r = empirical_rate(spec_for("Hm", p=100, reps=200, seed=22), "cq_mean")
        assert r.rejection_rate >= 0.6
        assert r.breakdown == {}

    def test_cov_test_detects_cov_shift(self):
        r = empirical_rate(spec_for("Hc", p=100, reps=200, seed=23), "lc_cov")
        assert r.rejection_rate >= 0.2

    def test_degenerate_replicates_are_retried_and_reported(self):
        # seed 22 draws one population flat enough to refuse; the run
        # still completes every requested replicate
        r = empirical_rate(spec_for("Hm", p=100, reps=200, seed=22), "cq_mean")
        assert r.retries == 1
        assert r.reps == 200

    def test_joint_power_dominates_cov_power(self):
        rc = empirical_rate(
            spec_for("Hc", p=100, reps=150, seed=25), "yu_fisher"
        )
        rmc = empirical_rate(
            spec_for("HmHc", p=100, reps=150, seed=26), "yu_fisher"
        )
        assert rmc.rejection_rate >= rc.rejection_rate - 0.05

    def test_permutation_baseline_calibrated_under_null(self):
        r = empirical_rate(
            spec_for("H0", p=40, reps=100, seed=24), "gpca", gpca_perms=200
        )
        assert r.rejection_rate <= 0.12
        assert r.breakdown == {}

    def test_reproducible_up_to_wall_clock(self):
        a = empirical_rate(spec_for("Hm", p=100, reps=60, seed=30), "yu_fisher")
        b = empirical_rate(spec_for("Hm", p=100, reps=60, seed=30), "yu_fisher")
        assert a.rejection_rate == b.rejection_rate
        assert a.breakdown == b.breakdown
        assert a.retries == b.retries

    def test_unknown_method_rejected(self):
        with pytest.raises(ContractViolationError, match="method"):
            empirical_rate(spec_for("H0"), "levene")

    def test_report_is_json_ready(self):
        r = empirical_rate(spec_for("H0", reps=20, seed=31), "yu_fisher")
        report = r.to_report()
        assert set(report) == {
            "scenario", "method", "n1", "n2", "p", "reps",
            "rejection_rate", "breakdown", "median_time_ms", "retries",
        }
        parsed = json.loads(json.dumps(report))
        assert parsed["scenario"] == "H0"
        assert parsed["method"] == "yu_fisher"
        assert parsed["reps"] == 20
        assert 0.0 <= parsed["rejection_rate"] <= 1.0
        assert parsed["median_time_ms"] >= 0.0

    def test_result_rate_must_be_a_fraction(self):
        with pytest.raises(ContractViolationError, match="rejection_rate"):
            MonteCarloResult(
                scenario="H0", method="yu_fisher", n1=10, n2=10, p=50,
                reps=10, rejection_rate=1.2, breakdown={},
                median_time_ms=1.0, retries=0,
            )


class TestFormatTable:
    @staticmethod
    def result(method, n1, n2, p, rate):
        return MonteCarloResult(
            scenario="Hm", method=method, n1=n1, n2=n2, p=p, reps=100,
            rejection_rate=rate, breakdown={}, median_time_ms=1.0, retries=0,
        )

    def test_grid_layout(self):
        rows = [
            self.result("yu_fisher", 10, 10, 50, 0.9386),
            self.result("yu_fisher", 10, 10, 100, 0.978),
            self.result("cq_mean", 10, 10, 50, 0.4976),
        ]
        text = format_table(rows)
        lines = text.splitlines()
        assert lines[0].split() == ["method", "n1,n2", "p=50", "p=100"]
        assert "93.86%" in lines[1] and "97.80%" in lines[1]
        # missing cell rendered as a dash
        assert lines[2].split()[-1] == "-"

    def test_rows_keyed_by_method_and_sizes(self):
        rows = [
            self.result("yu_fisher", 10, 10, 50, 0.5),
            self.result("yu_fisher", 20, 20, 50, 0.7),
        ]
        lines = format_table(rows).splitlines()
        assert len(lines) == 3
        assert "10,10" in lines[1] and "20,20" in lines[2]

    def test_empty_input_rejected(self):
        with pytest.raises(ContractViolationError, match="format"):
            format_table([])
