import math

import numpy as np
import pytest

from jsonsynth.envsim import QuadraticLandscape, contraction_report, landscape_step, ordering_probe, verify_contraction
from jsonsynth.errors import RegimeViolation
from jsonsynth.judge import CATEGORIES, JudgeAnswers, ScorerConfig


def test_noiseless_step_contracts_exactly():
    land = QuadraticLandscape(np.array([1.0, -2.0, 0.5]), mu=2.0)
    p = np.array([3.0, 1.0, -1.0])
    nxt = landscape_step(land, p, 0.1)
    assert np.linalg.norm(nxt - land.p_star) == pytest.approx(0.8 * np.linalg.norm(p - land.p_star), abs=1e-12)
    assert np.array_equal(landscape_step(land, land.p_star, 0.1), land.p_star)
    assert np.array_equal(landscape_step(land, p, 0.0), p)


def test_noisy_step_needs_rng():
    land = QuadraticLandscape.centered(2, noise_sigma=0.1)
    with pytest.raises(ValueError):
        landscape_step(land, np.ones(2), 0.1)
    a = landscape_step(land, np.ones(2), 0.1, np.random.default_rng(0))
    b = landscape_step(land, np.ones(2), 0.1, np.random.default_rng(0))
    assert np.array_equal(a, b)


def test_verify_noiseless():
    trace = verify_contraction(QuadraticLandscape.centered(4), 0.1, steps=50)
    assert trace.passed
    assert np.allclose(trace.ratios, 0.8, atol=1e-9)
    assert trace.details["max_ratio_error"] <= 1e-9


def test_recursion_bound_small_mc():
    land = QuadraticLandscape.centered(4, noise_sigma=0.05)
    trace = verify_contraction(land, 0.1, steps=100, trials=300, base_seed=5)
    assert trace.checks["recursion_within_3se"]
    # the stationary mean-square distance of the exact linear dynamics
    expected = (0.1 * 0.05) ** 2 / (1 - 0.8 ** 2)
    assert trace.details["stationary_mean_sq_dist"] == pytest.approx(expected)
    assert trace.mean_sq_dist[-1] == pytest.approx(expected, rel=0.25)


def test_regime_violation():
    land = QuadraticLandscape.centered(4)
    assert land.max_eta() == pytest.approx(0.5)
    with pytest.raises(RegimeViolation):
        verify_contraction(land, 0.9, guarantee=True)
    loose = verify_contraction(land, 0.9, steps=5)
    assert loose.ratios == pytest.approx(np.full(5, abs(1 - 1.8)))


def test_report_shape():
    land = QuadraticLandscape.centered(4)
    trace = verify_contraction(land, 0.1, steps=3)
    doc = contraction_report(land, trace, 3, 1)
    assert len(doc["per_step"]) == 3 and doc["verdict"]["pass"]
    assert doc["per_step"][0]["mean_sq_dist"] == pytest.approx(0.64)


def test_ordering_examples():
    cfg = ScorerConfig()
    assert ordering_probe(cfg, sim_values=[0.2, 0.9]).passed
    tied = ordering_probe(cfg, sim_values=[0.4, 0.4])
    assert tied.tie_mismatches == 0 and tied.violations == 0
    sweep = ordering_probe(cfg, pairs=100, seed=0)
    assert sweep.pairs == 100 and sweep.passed


def test_ordering_detects_zero_sim_weight():
    cfg = ScorerConfig(subreward_weights=(0.0, 0.25, 0.25, 0.25, 0.25))
    answers = JudgeAnswers({c: True for c in CATEGORIES})
    assert not ordering_probe(cfg, sim_values=[0.2, 0.9], answers=answers).passed
