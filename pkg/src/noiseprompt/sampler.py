"""Deterministic DDIM stepping, guided combination, inversion, re-denoise.

All functions are pure in (inputs, config) and work with any "model"
exposing ``eps_star(x, t, c) -> state`` (the analytic mixture testbed, or
a stub in tests).  The reverse step of size s is

    x_{t-s} = alpha_{t-s} * (x_t - sigma_t * eps) / alpha_t + sigma_{t-s} * eps

with eps the guided prediction at (x_t, t).  Inversion solves the
corresponding implicit equation

    x_t = (a_t/a_{t-s}) x_{t-s} + (s_t - (a_t/a_{t-s}) s_{t-s}) * eps(x_t, t)

by fixed-point iteration started at the source state, so that a single
iteration reproduces the usual one-shot approximation (eps evaluated at
the old state) while many iterations give an exact-inversion oracle.

Re-denoise is one reverse step of size k at guidance omega_l followed by
one inversion step of size k at guidance omega_w, both anchored at the
trajectory head; a guidance gap omega_l > omega_w leaves a
condition-dependent imprint on the returned noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError
from .schedule import NoiseSchedule
from .testbed import ClassLabel

__all__ = [
    "GuidanceConfig",
    "LatentState",
    "InversionResult",
    "guided_eps",
    "ddim_step",
    "ddim_invert_step",
    "sample_trajectory",
    "redenoise",
]


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales and re-denoise controls.

    omega_l guides the reverse (denoise) leg, omega_w the inversion leg;
    k is the macro-step size in grid timesteps.  fp_iters = 1 is the
    practical one-shot inversion; large fp_iters with a tight fp_tol is
    the exact-inversion oracle used in tests.
    """

    omega_l: float = 5.5
    omega_w: float = 1.0
    k: int = 100
    fp_iters: int = 1
    fp_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.fp_iters < 1:
            raise ValueError("fp_iters must be >= 1")
        if not self.fp_tol > 0.0:
            raise ValueError("fp_tol must be > 0")

    def exact(self, fp_iters: int = 50, fp_tol: float = 1e-12) -> "GuidanceConfig":
        """Copy configured as the exact-inversion oracle."""
        return replace(self, fp_iters=fp_iters, fp_tol=fp_tol)


@dataclass(frozen=True)
class LatentState:
    """A state tensor pinned to a schedule timestep."""

    x: np.ndarray
    t: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "x", arr)
        object.__setattr__(self, "t", int(self.t))
        if self.t < 0:
            raise ValueError("timestep must be >= 0")
        if not np.all(np.isfinite(arr)):
            # states typically go non-finite mid-pipeline (diverged
            # iteration, blown-up predictor), not through caller mistakes
            raise NumericError("latent state is non-finite")


@dataclass(frozen=True)
class InversionResult:
    """Inversion output plus fixed-point diagnostics."""

    state: LatentState
    iterations: int
    residual: float
    converged: bool


def guided_eps(model, x: np.ndarray, t: int, omega: float, c: ClassLabel) -> np.ndarray:
    """(omega+1) eps(x,t|c) - omega eps(x,t|null); unconditional when c is None."""
    if c is None:
        return model.eps_star(x, t, None)
    eps_c = model.eps_star(x, t, c)
    if omega == 0.0:
        return eps_c
    eps_null = model.eps_star(x, t, None)
    return (omega + 1.0) * eps_c - omega * eps_null


def ddim_step(
    model,
    schedule: NoiseSchedule,
    state: LatentState,
    step: int,
    omega: float,
    c: ClassLabel,
) -> LatentState:
    """One deterministic reverse step from t to t - step."""
    step = int(step)
    if step < 1:
        raise ValueError("step must be >= 1")
    t = state.t
    if t - step < 0:
        raise ValueError(f"step {step} exceeds current timestep {t}")
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    a_p, s_p = schedule.alpha(t - step), schedule.sigma(t - step)
    eps = guided_eps(model, state.x, t, omega, c)
    x0_hat = (state.x - s_t * eps) / a_t
    return LatentState(x=a_p * x0_hat + s_p * eps, t=t - step)


def ddim_invert_step(
    model,
    schedule: NoiseSchedule,
    state: LatentState,
    step: int,
    omega: float,
    c: ClassLabel,
    fp_iters: int = 1,
    fp_tol: float = 1e-10,
) -> InversionResult:
    """One inversion step from t to t + step, by fixed-point iteration.

    Non-convergence within fp_iters is reported in the result, not raised.
    """
    step = int(step)
    if step < 1:
        raise ValueError("step must be >= 1")
    if fp_iters < 1:
        raise ValueError("fp_iters must be >= 1")
    t = state.t
    t_next = t + step
    if t_next > schedule.big_t:
        raise ValueError(f"step {step} overshoots the grid head from t={t}")
    a_n, s_n = schedule.alpha(t_next), schedule.sigma(t_next)
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    ratio = a_n / a_t
    coeff = s_n - ratio * s_t
    base = ratio * state.x

    x = state.x  # first eps evaluation happens at the source state
    residual = np.inf
    iterations = 0
    for _ in range(fp_iters):
        x_new = base + coeff * guided_eps(model, x, t_next, omega, c)
        iterations += 1
        residual = float(
            np.linalg.norm(x_new - x) / max(1.0, float(np.linalg.norm(x_new)))
        )
        x = x_new
        if residual <= fp_tol:
            break
    return InversionResult(
        state=LatentState(x=x, t=t_next),
        iterations=iterations,
        residual=residual,
        converged=residual <= fp_tol,
    )


def sample_trajectory(
    model,
    schedule: NoiseSchedule,
    x_head: np.ndarray,
    n_steps: int,
    omega: float,
    c: ClassLabel,
    return_trajectory: bool = False,
):
    """Run the full reverse pass head -> 0 on a uniform stride.

    n_steps must divide the schedule grid.  Returns the clean state, or
    (clean state, [LatentState ...]) when return_trajectory is set.
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if schedule.big_t % n_steps != 0:
        raise ValueError(f"n_steps {n_steps} must divide the grid size {schedule.big_t}")
    stride = schedule.big_t // n_steps
    state = LatentState(x=x_head, t=schedule.big_t)
    trail = [state]
    for _ in range(n_steps):
        state = ddim_step(model, schedule, state, stride, omega, c)
        trail.append(state)
    if return_trajectory:
        return state.x, trail
    return state.x


def redenoise(
    model,
    schedule: NoiseSchedule,
    x_head: np.ndarray,
    cfg: GuidanceConfig,
    c: ClassLabel,
) -> np.ndarray:
    """Reverse step of size k at omega_l, then inversion at omega_w.

    Input and output both live at the trajectory head.  With
    omega_l == omega_w and an exact inversion this is the identity map
    (up to fixed-point tolerance); with omega_l > omega_w it shifts the
    noise along the condition's guidance direction.
    """
    head = LatentState(x=x_head, t=schedule.big_t)
    down = ddim_step(model, schedule, head, cfg.k, cfg.omega_l, c)
    result = ddim_invert_step(
        model,
        schedule,
        down,
        cfg.k,
        cfg.omega_w,
        c,
        fp_iters=cfg.fp_iters,
        fp_tol=cfg.fp_tol,
    )
    return result.state.x
