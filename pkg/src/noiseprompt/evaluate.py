"""Winning rate, preference deltas, Fréchet proxy, spectra similarity.

Winning rate counts, over held-out seeds, how often the synthesized
sample from the transformed noise scores strictly higher than the one
from the raw draw; exact ties contribute 0.5, so any transform equals
exactly 0.5 against itself.

The Fréchet proxy fits diagonal Gaussians to two sample sets and
evaluates d^2 = ||mu_a - mu_b||^2 + sum_i (sqrt(v_a,i) - sqrt(v_b,i))^2,
the closed form of the Gaussian Fréchet distance when both covariances
are diagonal.

The spectra diagnostic decomposes a noise pair, matches singular vectors
by index (both factors sorted by singular value), and reports |cosine|
per matched index, averaged between left and right factors and sorted
non-increasing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .npd import draw_pair_inputs
from .npnet import NpnetParams, golden
from .preference import score
from .rng import derive_stream
from .sampler import GuidanceConfig, redenoise, sample_trajectory
from .svd import svd
from .testbed import MixtureTestbed

__all__ = [
    "EvalReport",
    "winning_rate",
    "transform_winning_rate",
    "oracle_winning_rate",
    "frechet_gaussian",
    "singular_similarity",
    "evaluate_model",
    "report_lines",
    "write_report_csv",
]

_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class EvalReport:
    n_test: int
    winning_rate: float
    wins: int
    ties: int
    mean_score_delta: float
    frechet_baseline_vs_true: float
    frechet_golden_vs_true: float
    spectra_summary: tuple[float, ...]
    variance_floored: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.winning_rate <= 1.0:
            raise ValueError("winning_rate must lie in [0, 1]")
        if self.wins + self.ties > self.n_test:
            raise ValueError("win/tie counts exceed n_test")


@dataclass(frozen=True)
class _RateFragment:
    n_test: int
    winning_rate: float
    wins: int
    ties: int
    mean_score_delta: float


def transform_winning_rate(
    transform: Callable[[np.ndarray, int], np.ndarray],
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_test: int,
    seed_start: int,
    n_steps: int = 10,
    global_seed: int = 0,
) -> _RateFragment:
    """Winning rate of an arbitrary noise transform on fresh seeds.

    Seeds are drawn exactly as in collection (same derivation), so using
    the collection seed range reproduces its keep-side statistics.
    """
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    schedule = testbed.schedule
    wins = 0
    ties = 0
    deltas = []
    for seed in range(seed_start, seed_start + n_test):
        c, x_head = draw_pair_inputs(testbed, global_seed, seed)
        x_gold = transform(x_head, c)
        x0_base = sample_trajectory(testbed, schedule, x_head, n_steps, cfg.omega_l, c)
        x0_gold = sample_trajectory(testbed, schedule, x_gold, n_steps, cfg.omega_l, c)
        s_base = score(x0_base, c, testbed).value
        s_gold = score(x0_gold, c, testbed).value
        if s_gold > s_base:
            wins += 1
        elif s_gold == s_base:
            ties += 1
        deltas.append(s_gold - s_base)
    rate = (wins + 0.5 * ties) / n_test
    return _RateFragment(
        n_test=n_test,
        winning_rate=rate,
        wins=wins,
        ties=ties,
        mean_score_delta=float(np.mean(deltas)),
    )


def winning_rate(
    params: NpnetParams,
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_test: int,
    seed_start: int,
    n_steps: int = 10,
    global_seed: int = 0,
) -> _RateFragment:
    """Winning rate of the trained golden-noise map."""
    return transform_winning_rate(
        lambda x, c: golden(x, c, params),
        testbed,
        cfg,
        n_test,
        seed_start,
        n_steps=n_steps,
        global_seed=global_seed,
    )


def oracle_winning_rate(
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_test: int,
    seed_start: int,
    n_steps: int = 10,
    global_seed: int = 0,
) -> _RateFragment:
    """Winning rate of the re-denoise operator itself (no learning)."""
    return transform_winning_rate(
        lambda x, c: redenoise(testbed, testbed.schedule, x, cfg, c),
        testbed,
        cfg,
        n_test,
        seed_start,
        n_steps=n_steps,
        global_seed=global_seed,
    )


def _fit_diagonal(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    mu = samples.mean(axis=0)
    var = samples.var(axis=0)
    floored = bool(np.any(var < _VARIANCE_FLOOR))
    return mu, np.maximum(var, _VARIANCE_FLOOR), floored


def frechet_gaussian(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Squared Fréchet distance between diagonal-Gaussian fits."""
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample dimensions disagree")
    mu_a, var_a, _ = _fit_diagonal(a)
    mu_b, var_b, _ = _fit_diagonal(b)
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2))
    return mean_term + trace_term


def singular_similarity(x: np.ndarray, x_prime: np.ndarray) -> np.ndarray:
    """|cos| between matched singular vectors, sorted non-increasing.

    Index i matches the i-th left (and right) singular vectors of the
    two matrices after both spectra are sorted; the per-index value
    averages the left and right similarities, absorbing sign flips.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    if x.shape != xp.shape:
        raise ValueError("inputs must share one square shape")
    fa, fb = svd(x), svd(xp)
    cos_u = np.abs(np.sum(fa.u * fb.u, axis=0))
    cos_v = np.abs(np.sum(fa.v * fb.v, axis=0))
    per_index = np.clip(0.5 * (cos_u + cos_v), 0.0, 1.0)
    return np.sort(per_index)[::-1]


def evaluate_model(
    params: NpnetParams,
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_test: int,
    seed_start: int,
    n_steps: int = 10,
    global_seed: int = 0,
) -> EvalReport:
    """Full held-out evaluation of a trained golden-noise map.

    Alongside the winning rate, fits diagonal Gaussians to the
    synthesized sample sets and to true mixture draws (same classes,
    disjoint streams) for the Fréchet proxy, and summarizes singular
    vector similarity between each head noise and its golden version.
    """
    schedule = testbed.schedule
    wins = 0
    ties = 0
    deltas = []
    base_samples = []
    gold_samples = []
    true_samples = []
    spectra = []
    for seed in range(seed_start, seed_start + n_test):
        c, x_head = draw_pair_inputs(testbed, global_seed, seed)
        x_gold = golden(x_head, c, params)
        x0_base = sample_trajectory(testbed, schedule, x_head, n_steps, cfg.omega_l, c)
        x0_gold = sample_trajectory(testbed, schedule, x_gold, n_steps, cfg.omega_l, c)
        s_base = score(x0_base, c, testbed).value
        s_gold = score(x0_gold, c, testbed).value
        if s_gold > s_base:
            wins += 1
        elif s_gold == s_base:
            ties += 1
        deltas.append(s_gold - s_base)
        base_samples.append(x0_base.reshape(-1))
        gold_samples.append(x0_gold.reshape(-1))
        true_samples.append(
            testbed.sample_data(derive_stream(global_seed, f"true:{seed}"), c).reshape(-1)
        )
        spectra.append(singular_similarity(x_head, x_gold))

    base_arr = np.stack(base_samples)
    gold_arr = np.stack(gold_samples)
    true_arr = np.stack(true_samples)
    floored = (
        _fit_diagonal(base_arr)[2]
        or _fit_diagonal(gold_arr)[2]
        or _fit_diagonal(true_arr)[2]
    )
    return EvalReport(
        n_test=n_test,
        winning_rate=(wins + 0.5 * ties) / n_test,
        wins=wins,
        ties=ties,
        mean_score_delta=float(np.mean(deltas)),
        frechet_baseline_vs_true=frechet_gaussian(base_arr, true_arr),
        frechet_golden_vs_true=frechet_gaussian(gold_arr, true_arr),
        spectra_summary=tuple(np.mean(np.stack(spectra), axis=0)),
        variance_floored=floored,
    )


def report_lines(report: EvalReport) -> list[str]:
    lines = [
        f"n_test                    {report.n_test}",
        f"winning_rate              {report.winning_rate:.4f}  "
        f"(wins {report.wins}, ties {report.ties})",
        f"mean_score_delta          {report.mean_score_delta:+.4f}",
        f"frechet_baseline_vs_true  {report.frechet_baseline_vs_true:.6f}",
        f"frechet_golden_vs_true    {report.frechet_golden_vs_true:.6f}",
        "spectra mean |cos|        "
        + " ".join(f"{v:.4f}" for v in report.spectra_summary),
    ]
    if report.variance_floored:
        lines.append("note: variance floor 1e-12 applied to a degenerate fit")
    return lines


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["n_test", report.n_test])
        writer.writerow(["winning_rate", repr(report.winning_rate)])
        writer.writerow(["wins", report.wins])
        writer.writerow(["ties", report.ties])
        writer.writerow(["mean_score_delta", repr(report.mean_score_delta)])
        writer.writerow(
            ["frechet_baseline_vs_true", repr(report.frechet_baseline_vs_true)]
        )
        writer.writerow(["frechet_golden_vs_true", repr(report.frechet_golden_vs_true)])
        writer.writerow(["variance_floored", int(report.variance_floored)])
        for i, v in enumerate(report.spectra_summary):
            writer.writerow([f"spectra_abs_cos_{i}", repr(v)])
