"""Deterministic randomness, covariance kernels, and the constrained learner.

The learner is a spectral projected-gradient method: Barzilai-Borwein step
seeding with an Armijo backtracking safeguard and radial projection onto the
feasible ball. It only promises an approximate critical point (criticality
tolerance gamma), which is all the sever loop needs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "RandomSource",
    "sample_mean_cov",
    "top_eigenvector",
    "CriticalPointProblem",
    "LearnerResult",
    "feasible_descent_norm",
    "projected_gradient_critical_point",
    "finite_diff_jacobian",
]

_MASK64 = (1 << 64) - 1


class RandomSource:
    """64-bit-seeded random stream with labeled child derivation.

    Children are derived from the parent's seed and a string label, never
    from stream state, so the set of child streams does not depend on how
    much of the parent stream was consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.default_rng(self.seed)

    def uniform(self, size=None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), sorted."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        picked = self._gen.choice(n, size=k, replace=False)
        return np.sort(picked.astype(np.int64))

    def child(self, label: str) -> "RandomSource":
        digest = hashlib.blake2b(
            f"{self.seed}:{label}".encode("utf-8"), digest_size=8
        ).digest()
        return RandomSource(int.from_bytes(digest, "little"))

    def __repr__(self):
        return f"RandomSource(seed={self.seed})"


def sample_mean_cov(values: np.ndarray):
    """Mean and (1/m)-normalized covariance of row vectors.

    The 1/m normalization (not 1/(m-1)) matches the filtering analysis.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2 or vals.shape[0] == 0:
        raise ValueError(f"expected a nonempty (m, k) array, got shape {vals.shape}")
    mean = vals.mean(axis=0)
    centered = vals - mean
    cov = centered.T @ centered / vals.shape[0]
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def top_eigenvector(A: np.ndarray, rng: RandomSource, max_iter: int = 1000):
    """Leading eigenpair of a symmetric PSD matrix by power iteration.

    Returns (unit vector, Rayleigh quotient). Stops when successive Rayleigh
    quotients agree to 1e-12 * trace(A). A matrix of exact zeros returns the
    first standard basis vector with eigenvalue 0.
    """
    A = np.asarray(A, dtype=np.float64)
    k = A.shape[0]
    if A.ndim != 2 or A.shape != (k, k):
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = float(np.abs(A).max()) if A.size else 0.0
    asym = float(np.abs(A - A.T).max()) if A.size else 0.0
    if asym > 1e-10 * max(1.0, scale):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    A = 0.5 * (A + A.T)
    e1 = np.zeros(k)
    e1[0] = 1.0
    if scale == 0.0:
        return e1, 0.0
    trace = float(np.trace(A))
    tol = 1e-12 * max(trace, np.finfo(np.float64).tiny)

    v = rng.normal(k)
    nv = np.linalg.norm(v)
    if nv == 0.0:  # astronomically unlikely; any deterministic start works
        v = e1.copy()
        nv = 1.0
    v = v / nv
    mu = float(v @ (A @ v))
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector fell exactly in the nullspace; restart
            v = rng.normal(k)
            v = v / np.linalg.norm(v)
            mu = float(v @ (A @ v))
            continue
        v = w / nw
        mu_new = float(v @ (A @ v))
        if abs(mu_new - mu) < tol:
            mu = mu_new
            break
        mu = mu_new
    return v, mu


@dataclass
class CriticalPointProblem:
    """Constrained first-order stationarity problem over a Euclidean ball.

    objective_grad : w -> (f(w), grad f(w))
    center, radius : the feasible ball B_radius(center)
    gamma          : criticality tolerance
    max_iters      : None selects 10 * d * ceil(log(1/gamma)), capped at 1e5
    x0             : warm-start point (projected into the ball); None = center
    """

    objective_grad: Callable[[np.ndarray], tuple]
    center: np.ndarray
    radius: float
    gamma: float
    max_iters: Optional[int] = None
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def resolved_max_iters(self) -> int:
        if self.max_iters is not None:
            return self.max_iters
        d = self.center.size
        steps = 10 * d * math.ceil(max(1.0, math.log(1.0 / self.gamma)))
        return min(100000, steps)


@dataclass(frozen=True)
class LearnerResult:
    x: np.ndarray
    tolerance_met: bool
    iterations: int
    criticality: float


def _project(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    delta = x - center
    dist = np.linalg.norm(delta)
    if dist <= radius:
        return x
    return center + delta * (radius / dist)


def feasible_descent_norm(
    grad: np.ndarray, x: np.ndarray, center: np.ndarray, radius: float
) -> float:
    """Norm of the feasible part of the descent direction -grad at x.

    Interior points: the full gradient norm. Boundary points: the outward
    radial component of -grad is blocked by the constraint, so it is removed
    before taking the norm; an inward-pointing descent direction stays whole.
    Points within a relative 1e-12 of the sphere count as boundary.
    """
    dist = np.linalg.norm(x - center)
    if radius == 0.0:
        return 0.0
    if dist < radius * (1.0 - 1e-12):
        return float(np.linalg.norm(grad))
    normal = (x - center) / dist
    descent = -grad
    outward = float(descent @ normal)
    if outward > 0.0:
        descent = descent - outward * normal
    return float(np.linalg.norm(descent))


def projected_gradient_critical_point(
    prob: CriticalPointProblem, rng: RandomSource
) -> LearnerResult:
    """Find a gamma-approximate critical point of f over the feasible ball.

    Spectral projected gradient: the Barzilai-Borwein quotient seeds the step
    size, Armijo backtracking (constant 1e-4, halving) accepts it. Returns
    the best iterate seen with tolerance_met=False if the iteration budget
    runs out; the returned point always lies in the ball.
    """
    center, radius = prob.center, prob.radius
    if radius == 0.0:
        # the ball is a single point, vacuously critical
        return LearnerResult(center.copy(), True, 0, 0.0)

    x = center.copy() if prob.x0 is None else _project(
        np.asarray(prob.x0, dtype=np.float64).copy(), center, radius
    )
    f_x, g_x = prob.objective_grad(x)
    crit = feasible_descent_norm(g_x, x, center, radius)
    best_x, best_crit = x.copy(), crit
    step = 1.0 / max(1.0, float(np.linalg.norm(g_x)))
    max_iters = prob.resolved_max_iters()

    for it in range(max_iters):
        if crit <= prob.gamma:
            return LearnerResult(x, True, it, crit)
        accepted = False
        trial_step = step
        for _ in range(60):
            x_new = _project(x - trial_step * g_x, center, radius)
            move = x_new - x
            move_norm = float(np.linalg.norm(move))
            if move_norm == 0.0:
                break
            f_new, g_new = prob.objective_grad(x_new)
            if f_new <= f_x + 1e-4 * float(g_x @ move):
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            # no progress possible at this scale; x is numerically stationary
            break
        # Barzilai-Borwein seed for the next round
        y = g_new - g_x
        sy = float(move @ y)
        ss = float(move @ move)
        step = ss / sy if sy > 1e-300 else min(trial_step * 2.0, 1e12)
        step = float(np.clip(step, 1e-300, 1e12))
        x, f_x, g_x = x_new, f_new, g_new
        crit = feasible_descent_norm(g_x, x, center, radius)
        if crit < best_crit:
            best_x, best_crit = x.copy(), crit

    if crit <= prob.gamma:
        return LearnerResult(x, True, max_iters, crit)
    return LearnerResult(best_x, False, max_iters, best_crit)


def finite_diff_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference Jacobian; column j is (fn(w+h e_j) - fn(w-h e_j)) / 2h."""
    if h <= 0:
        raise ValueError("step size must be positive")
    w = np.asarray(w, dtype=np.float64)
    cols = []
    for j in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[j] += h
        wm[j] -= h
        cols.append((np.asarray(fn(wp)) - np.asarray(fn(wm))) / (2.0 * h))
    return np.stack(cols, axis=-1)
