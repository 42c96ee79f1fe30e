"""Analytic preference proxy and the pair-selection rule.

"Better aligned with the condition" is scored literally, as the
conditional log-density of the synthesized sample under the true data
mixture.  That makes the scorer deterministic and oracle-checkable while
preserving the ordering semantics a learned preference model provides.

A pair is kept when the re-denoised side beats the source side by more
than the filtering threshold: s0 + m < s0', strict, so exact ties are
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .testbed import ClassLabel, MixtureTestbed

__all__ = ["SCORER_ID", "PreferenceScore", "SelectionRule", "score", "select"]

SCORER_ID = "cond-logdensity-v1"


@dataclass(frozen=True)
class PreferenceScore:
    """Scalar preference value (higher is better) plus scorer provenance."""

    value: float
    scorer_id: str = SCORER_ID

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise ValueError("preference score must be finite")


@dataclass(frozen=True)
class SelectionRule:
    """Keep a pair iff s0 + m < s0_prime."""

    m: float = 0.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.m) and self.m >= 0.0):
            raise ValueError("threshold m must be finite and >= 0")


def score(x0: np.ndarray, c: ClassLabel, testbed: MixtureTestbed) -> PreferenceScore:
    """Conditional log-density of a synthesized sample."""
    if c is None:
        raise ValueError("preference scoring needs a concrete class")
    return PreferenceScore(value=testbed.log_density(x0, c))


def select(s0: float, s0_prime: float, rule: SelectionRule) -> bool:
    """Strict threshold comparison; ties and sub-threshold gains reject."""
    s0 = float(s0)
    s0_prime = float(s0_prime)
    if not (np.isfinite(s0) and np.isfinite(s0_prime)):
        raise ValueError("selection inputs must be finite")
    return s0 + rule.m < s0_prime
