"""Class-conditional Gaussian-mixture data distribution with exact scores.

The testbed stands in for a learned denoiser: because the data
distribution is a finite mixture of diagonal Gaussians, pushing it
through the forward process keeps it a diagonal mixture (component i at
time t is N(alpha_t * mu_i, alpha_t^2 * Gamma_i + sigma_t^2 * I)), and the
optimal noise prediction

    eps*(x, t | c) = -sigma_t * grad_x log p_t(x | c)

is available in closed form.  Conditioning on a class restricts to that
class's components; the null condition marginalizes over the class prior.

States are d_side x d_side matrices (matrix-shaped on purpose, so the
spectral branch of the predictor network has structure to work with);
internally everything is flattened to length d_side^2.

Testbed definition files are JSON with the grammar::

    {
      "d_side": 8,
      "class_priors": [0.5, 0.5],          # optional, uniform if absent
      "classes": [
        {"components": [
            {"weight": 0.5, "mean": [..d_side^2 floats..] | scalar,
             "variance": [..d_side^2 floats..] | scalar},
            ...
        ]},
        ...
      ]
    }

Scalar "mean"/"variance" entries broadcast over all coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError
from .rng import RngStream, gaussian, uniform
from .schedule import NoiseSchedule

__all__ = [
    "ClassLabel",
    "MixtureClass",
    "MixtureTestbed",
    "forward_diffuse",
    "load_testbed",
    "save_testbed",
    "default_testbed",
    "standard_normal_testbed",
]

# either None (the null condition) or an int class index
ClassLabel = int | None

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class MixtureClass:
    """One class: component weights, means and diagonal variances."""

    weights: np.ndarray  # (n_comp,)
    means: np.ndarray  # (n_comp, dim)
    variances: np.ndarray  # (n_comp, dim)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if w.ndim != 1 or m.ndim != 2 or v.ndim != 2:
            raise ValueError("weights must be 1-d; means/variances 2-d")
        if not (len(w) == len(m) == len(v)) or m.shape != v.shape:
            raise ValueError("component counts/shapes disagree")
        if np.any(w <= 0.0):
            raise ValueError("component weights must be positive")
        if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError("component weights must sum to 1")
        if np.any(v <= 0.0):
            raise ValueError("component variances must be positive")


@dataclass(frozen=True)
class MixtureTestbed:
    """Immutable mixture model over matrix-shaped states."""

    d_side: int
    classes: tuple[MixtureClass, ...]
    class_priors: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self) -> None:
        priors = np.asarray(self.class_priors, dtype=np.float64)
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.d_side < 1:
            raise ValueError("d_side must be >= 1")
        dim = self.d_side * self.d_side
        if len(self.classes) < 1:
            raise ValueError("need at least one class")
        if priors.shape != (len(self.classes),):
            raise ValueError("class_priors length must match class count")
        if np.any(priors <= 0.0) or abs(float(priors.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError("class priors must be positive and sum to 1")
        for cls in self.classes:
            if cls.means.shape[1] != dim:
                raise ValueError("component dimension must equal d_side^2")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.d_side * self.d_side

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != (self.d_side, self.d_side):
            raise ValueError(
                f"state must have shape {(self.d_side, self.d_side)}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("state must be finite")
        return arr.reshape(-1)

    def _components(self, c: ClassLabel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(log-weights, means, variances) of the selected mixture."""
        if c is None:
            logw, means, variances = [], [], []
            for prior, cls in zip(self.class_priors, self.classes):
                logw.append(np.log(prior) + np.log(cls.weights))
                means.append(cls.means)
                variances.append(cls.variances)
            return np.concatenate(logw), np.vstack(means), np.vstack(variances)
        c = int(c)
        if not 0 <= c < self.n_classes:
            raise ValueError(f"class index {c} outside [0, {self.n_classes})")
        cls = self.classes[c]
        return np.log(cls.weights), cls.means, cls.variances

    def eps_star(self, x: np.ndarray, t: int, c: ClassLabel) -> np.ndarray:
        """Optimal noise prediction -sigma_t grad_x log p_t(x | c)."""
        flat = self._check_state(x)
        alpha = self.schedule.alpha(t)
        sigma = self.schedule.sigma(t)
        if sigma == 0.0:
            if t > 0:
                raise NumericError(f"sigma({t}) = 0: degenerate noised density")
            return np.zeros_like(x, dtype=np.float64)
        logw, means, variances = self._components(c)
        m_t = alpha * means
        v_t = alpha * alpha * variances + sigma * sigma
        diff = flat[None, :] - m_t
        logp = logw - 0.5 * np.sum(diff * diff / v_t + np.log(2.0 * np.pi * v_t), axis=1)
        logp -= logp.max()
        resp = np.exp(logp)
        resp /= resp.sum()
        grad = -(resp[:, None] * diff / v_t).sum(axis=0)
        return (-sigma * grad).reshape(self.d_side, self.d_side)

    def log_density(self, x0: np.ndarray, c: ClassLabel) -> float:
        """log p(x0 | c) of the clean-data mixture, via log-sum-exp."""
        if c is None:
            raise ValueError("log_density needs a concrete class for conditional scoring")
        flat = self._check_state(x0)
        logw, means, variances = self._components(c)
        diff = flat[None, :] - means
        logp = logw - 0.5 * np.sum(
            diff * diff / variances + np.log(2.0 * np.pi * variances), axis=1
        )
        peak = logp.max()
        return float(peak + np.log(np.sum(np.exp(logp - peak))))

    def sample_class(self, stream: RngStream) -> int:
        """Draw a class index from the prior."""
        u = float(uniform(stream))
        return int(np.searchsorted(np.cumsum(self.class_priors), u, side="right"))

    def sample_data(self, stream: RngStream, c: ClassLabel) -> np.ndarray:
        """Draw a clean state from the (conditional) mixture."""
        logw, means, variances = self._components(c)
        cdf = np.cumsum(np.exp(logw))  # sums to 1: weights (and priors) do
        u = float(uniform(stream))
        idx = min(int(np.searchsorted(cdf, u, side="right")), len(means) - 1)
        noise = gaussian(stream, (self.dim,))
        flat = means[idx] + np.sqrt(variances[idx]) * noise
        return flat.reshape(self.d_side, self.d_side)


def forward_diffuse(
    testbed: MixtureTestbed, x0: np.ndarray, t: int, eps: np.ndarray
) -> np.ndarray:
    """x_t = alpha_t x_0 + sigma_t eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    sched = testbed.schedule
    return sched.alpha(t) * x0 + sched.sigma(t) * eps


def _pattern(d_side: int) -> np.ndarray:
    """Smooth unit-free bump used by the default testbed's class means."""
    u = np.sin(np.pi * (np.arange(d_side) + 0.5) / d_side)
    a = np.outer(u, u)
    return a / np.linalg.norm(a)


def default_testbed(
    d_side: int = 8, schedule: NoiseSchedule | None = None
) -> MixtureTestbed:
    """Two mirrored classes, two components each, on a d_side grid.

    Class means sit at +-0.8 and +-1.2 times a smooth bump of Frobenius
    norm 3, with per-coordinate variances 0.35 / 0.55 (comfortably above
    the 0.05 floor that keeps eps* Lipschitz on the sampled region).
    The mean scale is matched to the schedule's head alpha so that a
    fresh standard-normal draw is condition-deficient and the guided
    re-denoise shift improves the conditional likelihood of what the
    sampler synthesizes from it.
    """
    base = 3.0 * _pattern(d_side).reshape(-1)
    mk = lambda sign: MixtureClass(
        weights=np.array([0.5, 0.5]),
        means=np.stack([sign * 0.8 * base, sign * 1.2 * base]),
        variances=np.stack([np.full(base.size, 0.35), np.full(base.size, 0.55)]),
    )
    return MixtureTestbed(
        d_side=d_side,
        classes=(mk(+1.0), mk(-1.0)),
        class_priors=np.array([0.5, 0.5]),
        schedule=schedule if schedule is not None else NoiseSchedule(),
    )


def standard_normal_testbed(
    d_side: int = 8, schedule: NoiseSchedule | None = None, n_classes: int = 1
) -> MixtureTestbed:
    """Single N(0, I) component per class; eps*(x, t) = sigma_t x exactly."""
    dim = d_side * d_side
    cls = MixtureClass(
        weights=np.array([1.0]),
        means=np.zeros((1, dim)),
        variances=np.ones((1, dim)),
    )
    return MixtureTestbed(
        d_side=d_side,
        classes=tuple(cls for _ in range(n_classes)),
        class_priors=np.full(n_classes, 1.0 / n_classes),
        schedule=schedule if schedule is not None else NoiseSchedule(),
    )


def _coords(value, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape == (dim,):
        return arr
    raise ValueError(f"{what} must be a scalar or a list of d_side^2 = {dim} floats")


def testbed_to_dict(testbed: MixtureTestbed) -> dict:
    return {
        "d_side": testbed.d_side,
        "class_priors": testbed.class_priors.tolist(),
        "classes": [
            {
                "components": [
                    {
                        "weight": float(w),
                        "mean": mu.tolist(),
                        "variance": var.tolist(),
                    }
                    for w, mu, var in zip(cls.weights, cls.means, cls.variances)
                ]
            }
            for cls in testbed.classes
        ],
    }


def testbed_from_dict(spec: dict, schedule: NoiseSchedule | None = None) -> MixtureTestbed:
    d_side = int(spec["d_side"])
    dim = d_side * d_side
    raw_classes = spec["classes"]
    classes = []
    for entry in raw_classes:
        comps = entry["components"]
        weights = np.array([float(comp["weight"]) for comp in comps])
        means = np.stack([_coords(comp["mean"], dim, "mean") for comp in comps])
        variances = np.stack([_coords(comp["variance"], dim, "variance") for comp in comps])
        classes.append(MixtureClass(weights=weights, means=means, variances=variances))
    priors = spec.get("class_priors")
    if priors is None:
        priors = np.full(len(classes), 1.0 / len(classes))
    return MixtureTestbed(
        d_side=d_side,
        classes=tuple(classes),
        class_priors=np.asarray(priors, dtype=np.float64),
        schedule=schedule if schedule is not None else NoiseSchedule(),
    )


def save_testbed(testbed: MixtureTestbed, path: str | Path) -> None:
    Path(path).write_text(json.dumps(testbed_to_dict(testbed), indent=2) + "\n")


def load_testbed(path: str | Path, schedule: NoiseSchedule | None = None) -> MixtureTestbed:
    return testbed_from_dict(json.loads(Path(path).read_text()), schedule=schedule)
