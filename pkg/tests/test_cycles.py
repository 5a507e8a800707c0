import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from kinslab import cycles as cy


def test_sampler_matches_rayleigh_cdf():
    rng = np.random.default_rng(11)
    v = cy.sample_diffuse_velocity(rng, -1, size=200_000)
    assert np.all(v[:, 2] > 0)
    s = v[:, 2]
    # binned check against 1 - exp(-r^2/2), +- 3 sigma per bin
    edges = np.array([0.25, 0.5, 1.0, 1.5, 2.0, 3.0])
    emp = np.array([(s <= e).mean() for e in edges])
    cdf = 1 - np.exp(-(edges**2) / 2)
    sig = np.sqrt(cdf * (1 - cdf) / len(s))
    assert np.all(np.abs(emp - cdf) <= 3 * sig)
    assert stats.kstest(s, stats.rayleigh.cdf).pvalue > 1e-3
    # horizontal components are standard normal
    assert abs(v[:, 0].mean()) < 0.01 and abs(v[:, 1].std() - 1) < 0.01


def test_sampler_direction_and_wall_check():
    rng = np.random.default_rng(0)
    assert np.all(cy.sample_diffuse_velocity(rng, 1, size=100)[:, 2] < 0)
    assert cy.sample_diffuse_velocity(rng, 1).shape == (3,)
    with pytest.raises(ValueError):
        cy.sample_diffuse_velocity(rng, 0)


def test_first_exit_time():
    assert cy.first_exit_time(0.0, 1.0) == pytest.approx(1.0)
    assert cy.first_exit_time(0.5, -0.5) == pytest.approx(1.0)
    assert cy.first_exit_time(-1.0, 2.0) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        cy.CycleConfig(5.0, 3, 0)
    with pytest.raises(ValueError):
        cy.CycleConfig(-1.0, 3, 10)
    with pytest.raises(ValueError, match="grazing"):
        cy.CycleConfig(5.0, 3, 10, v=(1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        cy.CycleConfig(5.0, 3, 10, x3=2.0)


def test_single_bounce_survival_oracle():
    # T0 = 5, start at x3 = 0 with v3 = 1: t^1 = 4, survival of the next bounce exp(-2/16)
    run = cy.run_cycles(cy.CycleConfig(5.0, 2, 200_000, seed=3))
    p = run.counts[1] / run.samples
    ref = math.exp(-2 / 16)
    assert abs(p - ref) <= 3 * math.sqrt(ref * (1 - ref) / run.samples)
    assert cy.single_bounce_survival(4.0) == pytest.approx(ref)


def test_reruns_byte_identical_and_thread_independent():
    cfg = cy.CycleConfig(5.0, 6, 150_000, seed=42)
    a = cy.run_cycles(cfg)
    b = cy.run_cycles(cfg, threads=3)
    assert a.counts.tobytes() == b.counts.tobytes()
    assert a.bounces.tobytes() == b.bounces.tobytes()
    c = cy.run_cycles(cy.CycleConfig(5.0, 6, 150_000, seed=43))
    assert c.counts.tobytes() != a.counts.tobytes()


def test_paths_strictly_decrease():
    run = cy.run_cycles(cy.CycleConfig(10.0, 12, 5000, seed=1, keep_paths=200))
    P = run.paths
    assert P.shape == (200, 12)
    for row, b in zip(P, run.bounces[:200]):
        r = row[~np.isnan(row)]
        assert np.all(np.diff(r) < 0)
        # positive times up to the bounce index, then at most the first crossing
        assert np.all(r[:b] > 0) and np.all(r[b:] <= 0) and len(r) <= b + 1
    assert np.all(np.diff(run.counts) <= 0)


def test_confidence_interval_brackets_estimate():
    run = cy.run_cycles(cy.CycleConfig(5.0, 5, 20_000, seed=5))
    lo, hi = run.confidence_interval()
    p = run.p_hat
    assert np.all(lo <= p) and np.all(p <= hi)
    # exact binomial CI against scipy directly
    ci = stats.binomtest(int(run.counts[2]), run.samples).proportion_ci(0.95, method="exact")
    assert lo[2] == pytest.approx(ci.low) and hi[2] == pytest.approx(ci.high)


def test_geometric_envelope_and_insufficient_samples():
    run = cy.run_cycles(cy.CycleConfig(5.0, 8, 200_000, seed=9))
    env = cy.geometric_envelope(run)
    assert env["passed"] and env["concave"] and env["rate"] > 0
    with pytest.raises(cy.InsufficientSamples) as exc:
        cy.estimate_persistence([10.0], [1.0], samples=1000)
    assert exc.value.required > 1000


def test_persistence_table_outputs():
    tab = cy.estimate_persistence([5.0], [0.1, 0.2], samples=50_000, seed=2)
    csv = tab.to_csv().splitlines()
    assert csv[0] == "T0,C1,k,p_hat,ci_low,ci_high,count"
    assert len(csv) == 3
    assert tab.best in tab.C1_C2
    assert '"samples": 50000' in tab.to_json()


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 30.0), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_survival_counts_monotone(T0, k_max, seed):
    run = cy.run_cycles(cy.CycleConfig(T0, k_max, 500, seed=seed))
    assert np.all(np.diff(run.counts) <= 0)
    assert np.all((run.counts >= 0) & (run.counts <= 500))
    # the bounce index is consistent with the counts
    assert all((run.bounces >= j).sum() == run.counts[j - 1] for j in range(1, k_max + 1))
