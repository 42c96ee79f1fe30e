"""Numerical check of the closed-form re-denoise delta.

One macro denoise step at guidance omega_l followed by one inversion
step at omega_w, both spanning k grid steps at the trajectory head T,
satisfies to first order

    x'_T = x_T + (alpha_T sigma_{T-k} - alpha_{T-k} sigma_T) / alpha_{T-k}
               * (omega_l - omega_w)
               * (eps*(x_mid, T-k/2 | c) - eps*(x_mid, T-k/2 | null))

with x_mid the state halfway down the denoise leg.  The Taylor remainder
is second order in k, so halving k should quarter the residual; the
verifier measures exactly that, along with the Lipschitz ratio
||x_T - x_{T-k}|| / k that the expansion presupposes is bounded.

The expansion never defines which trajectory supplies the midpoint
state.  The primary convention here is the state reached by a DDIM
half-step of the denoise leg (the only state the procedure actually
visits near that time); residuals under the straight average
(x_T + x_{T-k}) / 2 are reported alongside as a sensitivity check.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError
from .rng import derive_stream, gaussian
from .sampler import GuidanceConfig, LatentState, ddim_step, redenoise
from .schedule import NoiseSchedule
from .testbed import ClassLabel, MixtureTestbed

__all__ = [
    "TheoremReport",
    "redenoise_coefficient",
    "rhs_closed_form",
    "verify_theorem",
    "report_table",
    "write_report_csv",
]


@dataclass(frozen=True)
class TheoremReport:
    """Per-k residuals of the closed-form delta, plus diagnostics.

    residuals[i] is the mean over trials of ||(x'_T - x_T) - rhs(k_i)||;
    ratios[i] compares consecutive k (expected ~ 0.25 for a second-order
    remainder); midpoint_sensitivity holds the residuals recomputed with
    the average-state midpoint convention.
    """

    k_values: tuple[int, ...]
    residuals: tuple[float, ...]
    predicted_delta_norms: tuple[float, ...]
    actual_delta_norms: tuple[float, ...]
    midpoint_sensitivity: tuple[float, ...]
    ratios: tuple[float, ...]
    loglog_slope: float
    lipschitz_estimate: float
    n_trials: int

    def __post_init__(self) -> None:
        n = len(self.k_values)
        if not (
            len(self.residuals)
            == len(self.predicted_delta_norms)
            == len(self.actual_delta_norms)
            == len(self.midpoint_sensitivity)
            == n
        ):
            raise ValueError("report columns must have equal length")
        for column in (
            self.residuals,
            self.predicted_delta_norms,
            self.actual_delta_norms,
            self.midpoint_sensitivity,
        ):
            arr = np.asarray(column)
            if not (np.all(np.isfinite(arr)) and np.all(arr >= 0.0)):
                raise ValueError("report entries must be finite and nonnegative")

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios))


def redenoise_coefficient(schedule: NoiseSchedule, k: int, t_head: int | None = None) -> float:
    """(alpha_T sigma_{T-k} - alpha_{T-k} sigma_T) / alpha_{T-k}.

    Well defined whenever alpha_{T-k} > 0, including alpha_T = 0, where
    it equals -1 exactly.
    """
    t_head = schedule.big_t if t_head is None else int(t_head)
    k = int(k)
    if k < 1 or t_head - k < 0:
        raise ValueError("need 1 <= k <= t_head")
    a_h, s_h = schedule.alpha(t_head), schedule.sigma(t_head)
    a_b, s_b = schedule.alpha(t_head - k), schedule.sigma(t_head - k)
    if a_b == 0.0:
        raise NumericError("alpha(T - k) = 0: coefficient is singular")
    return (a_h * s_b - a_b * s_h) / a_b


def rhs_closed_form(
    testbed: MixtureTestbed,
    x_head: np.ndarray,
    k: int,
    omega_l: float,
    omega_w: float,
    c: ClassLabel,
) -> np.ndarray:
    """Closed-form prediction for the re-denoise output at the head."""
    schedule = testbed.schedule
    k = int(k)
    if k % 2 != 0:
        raise ValueError("k must be even so the midpoint lies on the grid")
    coeff = redenoise_coefficient(schedule, k)
    t_head = schedule.big_t
    mid = ddim_step(
        testbed, schedule, LatentState(x=x_head, t=t_head), k // 2, omega_l, c
    )
    t_mid = t_head - k // 2
    gap_term = testbed.eps_star(mid.x, t_mid, c) - testbed.eps_star(mid.x, t_mid, None)
    return np.asarray(x_head, dtype=np.float64) + coeff * (omega_l - omega_w) * gap_term


def _rhs_average_midpoint(
    testbed: MixtureTestbed,
    x_head: np.ndarray,
    x_back: np.ndarray,
    k: int,
    omega_l: float,
    omega_w: float,
    c: ClassLabel,
) -> np.ndarray:
    """Alternative convention: midpoint state = (x_T + x_{T-k}) / 2."""
    schedule = testbed.schedule
    coeff = redenoise_coefficient(schedule, k)
    t_mid = schedule.big_t - k // 2
    x_mid = 0.5 * (np.asarray(x_head) + np.asarray(x_back))
    gap_term = testbed.eps_star(x_mid, t_mid, c) - testbed.eps_star(x_mid, t_mid, None)
    return np.asarray(x_head, dtype=np.float64) + coeff * (omega_l - omega_w) * gap_term


def verify_theorem(
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_trials: int,
    k_sequence,
    global_seed: int = 0,
) -> TheoremReport:
    """Measure closed-form residuals over random head noises.

    k_sequence must be strictly decreasing with every k even on the
    grid.  The actual side runs the exact-inversion oracle (fp_iters 50,
    fp_tol 1e-12) so the residual isolates the Taylor error rather than
    one-shot inversion error.  Trials are independent; non-finite
    residuals raise rather than silently polluting the means.
    """
    ks = [int(k) for k in k_sequence]
    if any(a <= b for a, b in zip(ks, ks[1:])):
        raise ValueError("k_sequence must be strictly decreasing")
    if any(k % 2 != 0 or k < 2 for k in ks):
        raise ValueError("every k must be even and >= 2")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")

    schedule = testbed.schedule
    exact = cfg.exact()
    t_head = schedule.big_t
    shape = (testbed.d_side, testbed.d_side)

    residuals = {k: [] for k in ks}
    alt_residuals = {k: [] for k in ks}
    predicted = {k: [] for k in ks}
    actual = {k: [] for k in ks}
    lipschitz = 0.0

    for trial in range(n_trials):
        stream = derive_stream(global_seed, f"theorem-trial:{trial}")
        x_head = gaussian(stream, shape)
        c = trial % testbed.n_classes
        for k in ks:
            trial_cfg = GuidanceConfig(
                omega_l=exact.omega_l,
                omega_w=exact.omega_w,
                k=k,
                fp_iters=exact.fp_iters,
                fp_tol=exact.fp_tol,
            )
            x_prime = redenoise(testbed, schedule, x_head, trial_cfg, c)
            rhs = rhs_closed_form(testbed, x_head, k, cfg.omega_l, cfg.omega_w, c)
            resid = float(np.linalg.norm(x_prime - rhs))
            if not np.isfinite(resid):
                raise NumericError(f"non-finite residual at trial {trial}, k={k}")
            residuals[k].append(resid)
            predicted[k].append(float(np.linalg.norm(rhs - x_head)))
            actual[k].append(float(np.linalg.norm(x_prime - x_head)))
            back = ddim_step(
                testbed,
                schedule,
                LatentState(x=x_head, t=t_head),
                k,
                cfg.omega_l,
                c,
            )
            lipschitz = max(
                lipschitz, float(np.linalg.norm(x_head - back.x)) / k
            )
            alt = _rhs_average_midpoint(
                testbed, x_head, back.x, k, cfg.omega_l, cfg.omega_w, c
            )
            alt_residuals[k].append(float(np.linalg.norm(x_prime - alt)))

    mean_res = [float(np.mean(residuals[k])) for k in ks]
    ratios = tuple(mean_res[i + 1] / mean_res[i] for i in range(len(ks) - 1))
    if len(ks) >= 2 and all(r > 0 for r in mean_res):
        slope = float(np.polyfit(np.log(ks), np.log(mean_res), 1)[0])
    else:
        slope = float("nan")
    return TheoremReport(
        k_values=tuple(ks),
        residuals=tuple(mean_res),
        predicted_delta_norms=tuple(float(np.mean(predicted[k])) for k in ks),
        actual_delta_norms=tuple(float(np.mean(actual[k])) for k in ks),
        midpoint_sensitivity=tuple(float(np.mean(alt_residuals[k])) for k in ks),
        ratios=ratios,
        loglog_slope=slope,
        lipschitz_estimate=lipschitz,
        n_trials=n_trials,
    )


def report_table(report: TheoremReport) -> str:
    """Plain-text table of the report, one row per k."""
    header = (
        f"{'k':>6} {'residual':>14} {'ratio':>8} {'pred |d|':>12} "
        f"{'actual |d|':>12} {'alt-mid res':>12}"
    )
    lines = [header, "-" * len(header)]
    for i, k in enumerate(report.k_values):
        ratio = f"{report.ratios[i - 1]:.4f}" if i > 0 else "-"
        lines.append(
            f"{k:>6} {report.residuals[i]:>14.6e} {ratio:>8} "
            f"{report.predicted_delta_norms[i]:>12.4e} "
            f"{report.actual_delta_norms[i]:>12.4e} "
            f"{report.midpoint_sensitivity[i]:>12.4e}"
        )
    lines.append(
        f"mean ratio r(k/2)/r(k) = {report.mean_ratio:.4f}   "
        f"log-log slope = {report.loglog_slope:.4f}   "
        f"lipschitz estimate = {report.lipschitz_estimate:.4f}   "
        f"trials = {report.n_trials}"
    )
    return "\n".join(lines)


def write_report_csv(report: TheoremReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "k",
                "mean_residual",
                "ratio_vs_prev_k",
                "predicted_delta_norm",
                "actual_delta_norm",
                "avg_midpoint_residual",
                "lipschitz_estimate",
            ]
        )
        for i, k in enumerate(report.k_values):
            writer.writerow(
                [
                    k,
                    repr(report.residuals[i]),
                    repr(report.ratios[i - 1]) if i > 0 else "",
                    repr(report.predicted_delta_norms[i]),
                    repr(report.actual_delta_norms[i]),
                    repr(report.midpoint_sensitivity[i]),
                    repr(report.lipschitz_estimate),
                ]
            )
