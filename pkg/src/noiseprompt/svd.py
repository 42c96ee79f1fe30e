"""Deterministic SVD of small square matrices via one-sided Jacobi.

Factor ambiguity is pinned down so that equal inputs always produce
bit-identical factors: singular values are sorted non-increasing, and the
sign of each column of ``u`` is flipped so its first entry of
non-negligible magnitude is nonnegative.  That convention matters because
downstream code reuses ``u`` and ``v`` verbatim to rebuild a matrix from
edited singular values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SvdFactors", "svd"]

# one-sided Jacobi sweeps stop once every column pair is orthogonal to
# this relative level; 1e-12 leaves reconstruction well under 1e-9
_OFFDIAG_TOL = 1e-12
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdFactors:
    """u @ diag(s) @ v.T reconstruction of a square matrix."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def d(self) -> int:
        return self.s.shape[0]


def svd(m: np.ndarray) -> SvdFactors:
    """Decompose a finite square matrix into orthonormal u, v and s >= 0.

    Uses one-sided Jacobi rotations on the columns of a working copy: at
    convergence the columns are mutually orthogonal, their norms are the
    singular values and the accumulated rotations give v.  Deterministic
    for a fixed input (fixed sweep order, no pivoting on values).
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"svd expects a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValueError("svd expects d >= 1")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd expects finite entries")

    d = a.shape[0]
    work = a.copy()
    v = np.eye(d)

    for _ in range(_MAX_SWEEPS):
        off = 0.0
        for p in range(d - 1):
            for q in range(p + 1, d):
                cp = work[:, p]
                cq = work[:, q]
                app = float(cp @ cp)
                aqq = float(cq @ cq)
                apq = float(cp @ cq)
                denom = np.sqrt(app * aqq)
                if denom > 0.0:
                    off = max(off, abs(apq) / denom)
                if apq == 0.0:
                    continue
                # rotation angle that zeroes the (p, q) inner product
                theta = 0.5 * np.arctan2(2.0 * apq, app - aqq)
                c = np.cos(theta)
                s = np.sin(theta)
                new_p = c * cp + s * cq
                new_q = -s * cp + c * cq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp + s * vq
                v[:, q] = -s * vp + c * vq
        if off < _OFFDIAG_TOL:
            break

    sigma = np.sqrt(np.sum(work * work, axis=0))
    u = np.zeros_like(work)
    scale = float(np.max(sigma)) if d else 0.0
    tiny = max(scale, 1.0) * 1e-300
    for j in range(d):
        if sigma[j] > tiny:
            u[:, j] = work[:, j] / sigma[j]
        else:
            # rank-deficient column: complete the basis deterministically
            u[:, j] = _orthonormal_completion(u, j, d)
            sigma[j] = 0.0

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]

    # sign convention: first entry of non-negligible magnitude in each u
    # column is nonnegative (exact-zero leading entries are skipped)
    for j in range(d):
        col = u[:, j]
        lead = 0.0
        for val in col:
            if abs(val) > 1e-14:
                lead = val
                break
        if lead < 0.0:
            u[:, j] = -col
            v[:, j] = -v[:, j]

    return SvdFactors(u=u, s=sigma, v=v)


def _orthonormal_completion(u: np.ndarray, j: int, d: int) -> np.ndarray:
    """Gram-Schmidt a canonical basis vector against the filled columns."""
    for k in range(d):
        cand = np.zeros(d)
        cand[k] = 1.0
        for i in range(j):
            cand -= (u[:, i] @ cand) * u[:, i]
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            return cand / norm
    raise RuntimeError("failed to complete orthonormal basis")
