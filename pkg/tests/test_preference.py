"""Preference proxy ordering and the strict selection rule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noiseprompt.preference import (
    SCORER_ID,
    PreferenceScore,
    SelectionRule,
    score,
    select,
)
from noiseprompt.testbed import MixtureClass, MixtureTestbed


@pytest.fixture(scope="module")
def single_gaussian(schedule):
    dim = 16
    mu = np.linspace(-1.0, 1.0, dim)
    cls = MixtureClass(
        weights=np.array([1.0]), means=mu[None, :], variances=np.ones((1, dim))
    )
    return MixtureTestbed(
        d_side=4, classes=(cls,), class_priors=np.array([1.0]), schedule=schedule
    ), mu


def test_score_is_conditional_log_density(tb, rng):
    x = rng.standard_normal((8, 8))
    s = score(x, 1, tb)
    assert s.value == tb.log_density(x, 1)
    assert s.scorer_id == SCORER_ID


def test_mode_beats_perturbations(single_gaussian, rng):
    bed, mu = single_gaussian
    at_mode = score(mu.reshape(4, 4), 0, bed).value
    for _ in range(10):
        other = mu + 0.4 * rng.standard_normal(16)
        assert score(other.reshape(4, 4), 0, bed).value < at_mode


def test_unit_gaussian_quadratic_falloff(single_gaussian, rng):
    bed, mu = single_gaussian
    delta = rng.standard_normal(16)
    drop = score((mu + delta).reshape(4, 4), 0, bed).value - score(
        mu.reshape(4, 4), 0, bed
    ).value
    assert drop == pytest.approx(-0.5 * np.sum(delta**2), rel=1e-10)


def test_ordering_matches_brute_force(tb, rng):
    def brute(x, c):
        cls = tb.classes[c]
        total = 0.0
        for w, mu, var in zip(cls.weights, cls.means, cls.variances):
            norm = np.prod(1.0 / np.sqrt(2 * np.pi * var))
            total += w * norm * np.exp(-0.5 * np.sum((x.reshape(-1) - mu) ** 2 / var))
        return total

    for _ in range(25):
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        c = int(rng.integers(0, 2))
        assert (score(a, c, tb).value > score(b, c, tb).value) == (
            brute(a, c) > brute(b, c)
        )


def test_null_class_rejected(tb):
    with pytest.raises(ValueError):
        score(np.zeros((8, 8)), None, tb)


def test_score_value_finite_enforced():
    with pytest.raises(ValueError):
        PreferenceScore(value=np.nan)


class TestSelect:
    def test_plain_improvement(self):
        assert select(1.0, 1.1, SelectionRule(m=0.0)) is True

    def test_tie_rejected(self):
        assert select(1.0, 1.0, SelectionRule(m=0.0)) is False

    def test_threshold_blocks(self):
        assert select(1.0, 1.009, SelectionRule(m=0.01)) is False

    def test_threshold_passes_above(self):
        assert select(1.0, 1.011, SelectionRule(m=0.01)) is True

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            select(np.nan, 1.0, SelectionRule())

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            SelectionRule(m=-0.1)
        with pytest.raises(ValueError):
            SelectionRule(m=np.inf)

    def test_brute_force_agreement(self, rng):
        for _ in range(1000):
            s0 = float(rng.standard_normal())
            s0p = s0 if rng.random() < 0.1 else float(rng.standard_normal())
            m = float(rng.random() * 0.05)
            assert select(s0, s0p, SelectionRule(m=m)) == (s0 + m < s0p)

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(-1e6, 1e6),
        st.floats(-1e6, 1e6),
        st.floats(0, 1e3),
        st.floats(0.0, 10.0),
        st.floats(0.0, 10.0),
    )
    def test_monotone(self, s0, s0p, m, raise_prime, raise_m):
        base = select(s0, s0p, SelectionRule(m=m))
        if base:
            # raising the winning side never flips true -> false
            assert select(s0, s0p + raise_prime, SelectionRule(m=m))
        else:
            # raising the threshold never flips false -> true
            assert not select(s0, s0p, SelectionRule(m=m + raise_m))
