"""Variance-preserving noise schedule on a discrete timestep grid.

The family is ``alpha(t) = cos(theta_max * t / T)``, ``sigma(t) =
sin(theta_max * t / T)`` for t in {0..T}, which satisfies alpha(0) = 1,
sigma(0) = 0 and alpha^2 + sigma^2 = 1 exactly, with alpha non-increasing
and sigma non-decreasing.

theta_max defaults to 0.35*pi rather than the full quarter period, for
two reasons.  First, the head must keep alpha(T) bounded away from zero:
at alpha = 0 the noised mixture collapses to N(0, I) for every
condition, so a step taken from the head carries no condition
information and the closed-form re-denoise delta loses an order of
accuracy.  Second, sampling starts from a standard normal draw while the
model's implied head distribution has mean alpha(T) * E[x0 | c]; a
substantial alpha(T) makes fresh noise measurably condition-deficient,
which is what the guidance-gap re-denoise shift then corrects.  Both
effects mirror practical discrete schedules, which likewise stop at a
positive terminal alpha.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "DEFAULT_BIG_T", "DEFAULT_THETA_MAX"]

DEFAULT_BIG_T = 1000
DEFAULT_THETA_MAX = 0.35 * np.pi


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_t / sigma_t lookup tables over t in {0..big_t}."""

    big_t: int = DEFAULT_BIG_T
    theta_max: float = DEFAULT_THETA_MAX
    alphas: np.ndarray = field(init=False, repr=False)
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.big_t < 1:
            raise ValueError("big_t must be >= 1")
        if not 0.0 < self.theta_max <= np.pi / 2:
            raise ValueError("theta_max must lie in (0, pi/2]")
        theta = self.theta_max * np.arange(self.big_t + 1) / self.big_t
        object.__setattr__(self, "alphas", np.cos(theta))
        object.__setattr__(self, "sigmas", np.sin(theta))

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.big_t:
            raise ValueError(f"timestep {t} outside [0, {self.big_t}]")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check_t(t)])

    def descriptor(self) -> str:
        """Canonical text form, hashed into dataset headers."""
        return f"cosine-capped:T={self.big_t}:theta_max={self.theta_max!r}"

    def descriptor_hash(self) -> bytes:
        return hashlib.sha256(self.descriptor().encode("utf-8")).digest()
