"""Shared value types and the moment-model interface.

Everything downstream (filtering, the sever loop, the experiment harness)
speaks in terms of these types: an immutable `Dataset`, an `ActiveSet` of
surviving sample indices, `HyperParams` bundling the problem constants,
and `MomentModel`, the per-sample moment/Jacobian contract.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "EstimationError",
    "WeakInstrumentsError",
    "FilterExhaustedError",
    "Dataset",
    "ActiveSet",
    "RadiusSchedule",
    "HyperParams",
    "EstimateReport",
    "MomentModel",
    "mean_moment",
    "mean_jacobian",
]


class EstimationError(Exception):
    """Base class for estimator failures that a sweep records as a failed cell."""


class WeakInstrumentsError(EstimationError):
    """Instrument matrix is rank deficient or under-identified."""


class FilterExhaustedError(EstimationError):
    """Filtering removed so many samples that no trustworthy set remains."""


def _as_locked_float(arr, name: str, ndim: int) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, order="C")
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    if out.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains NaN or infinite entries")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable sample container.

    X : (n, d) regressors / characteristics
    Y : (n,)   responses
    Z : (n, p) instruments
    T : (n,)   optional binary treatment indicator
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    T: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "X", _as_locked_float(self.X, "X", 2))
        object.__setattr__(self, "Y", _as_locked_float(self.Y, "Y", 1))
        object.__setattr__(self, "Z", _as_locked_float(self.Z, "Z", 2))
        if self.T is not None:
            object.__setattr__(self, "T", _as_locked_float(self.T, "T", 1))
        n = self.X.shape[0]
        if self.Y.shape[0] != n or self.Z.shape[0] != n:
            raise ValueError(
                f"row mismatch: X has {n}, Y has {self.Y.shape[0]}, Z has {self.Z.shape[0]}"
            )
        if self.T is not None and self.T.shape[0] != n:
            raise ValueError(f"row mismatch: T has {self.T.shape[0]}, expected {n}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class ActiveSet:
    """Sorted, duplicate-free set of 0-based sample indices."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).ravel()
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            idx = np.unique(idx)
            if idx[0] < 0:
                raise ValueError("negative sample index")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def full(cls, n: int) -> "ActiveSet":
        return cls(np.arange(n, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.indices.size)

    def is_subset_of(self, other: "ActiveSet") -> bool:
        return bool(np.isin(self.indices, other.indices).all())


@dataclass(frozen=True)
class RadiusSchedule:
    """Coefficients of the affine radius recursion

        R_next = c1 * gamma / lam**2
                 + c2 * ((L**2 / lam**2) * R * sqrt(eps)
                         + sigma * (L**1.5 / lam**2) * sqrt(eps))

    `practice` keeps the contraction usable at desk scale; `theory` carries
    the constant under which the formal guarantee is proved.
    """

    c1: float = 4.0
    c2: float = 2.0

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("schedule coefficients must be positive")

    @classmethod
    def practice(cls) -> "RadiusSchedule":
        return cls(c1=4.0, c2=2.0)

    @classmethod
    def theory(cls) -> "RadiusSchedule":
        return cls(c1=4.0, c2=2412.0)

    def next_radius(self, radius: float, hp: "HyperParams", gamma: float) -> float:
        lam2 = hp.lam**2
        root_eps = math.sqrt(hp.eps)
        return self.c1 * gamma / lam2 + self.c2 * (
            (hp.L**2 / lam2) * radius * root_eps
            + hp.sigma * (hp.L**1.5 / lam2) * root_eps
        )


# Precondition constant for the formal error guarantee: the analysis needs
# (L^2 / lam^2) * sqrt(eps) below this before the contraction argument holds.
THEORY_PRECONDITION_BOUND = 1.0 / 9648.0


@dataclass(frozen=True)
class HyperParams:
    """Problem constants handed to the robust estimators.

    eps    : corruption fraction, 0 <= eps < 1/2
    lam    : lower bound on the smallest singular value of the mean Jacobian
    L      : directional second-moment bound on per-sample Jacobians
    sigma  : moment noise scale at the target parameter
    gamma  : learner criticality tolerance; None selects sigma * L**1.5 * sqrt(eps)
    delta  : failure probability budget for amplification, in (0, 1)
    R0     : initial search radius around the origin
    sched  : radius recursion coefficients
    """

    eps: float
    lam: float
    L: float
    sigma: float
    R0: float
    gamma: Optional[float] = None
    delta: float = 0.05
    sched: RadiusSchedule = field(default_factory=RadiusSchedule)

    def __post_init__(self):
        if not 0.0 <= self.eps < 0.5:
            raise ValueError(f"eps must lie in [0, 0.5), got {self.eps}")
        if self.lam <= 0 or self.L <= 0:
            raise ValueError("lam and L must be positive")
        if self.lam > self.L:
            raise ValueError(
                f"lam (singular-value lower bound) must not exceed L "
                f"(second-moment upper bound): {self.lam} > {self.L}"
            )
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.R0 <= 0:
            raise ValueError("R0 must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive when given")

    def resolved_gamma(self) -> float:
        """Criticality tolerance with the default formula and a numerical floor.

        The floor keeps the learner's stopping rule meaningful when the
        default sigma * L**1.5 * sqrt(eps) collapses to zero (noiseless or
        eps = 0 runs).
        """
        if self.gamma is not None:
            return self.gamma
        floor = 1e-10 * max(1.0, self.lam**2 * self.R0)
        return max(self.sigma * self.L**1.5 * math.sqrt(self.eps), floor)

    @property
    def theory_precondition_lhs(self) -> float:
        return (self.L**2 / self.lam**2) * math.sqrt(self.eps)

    @property
    def theory_precondition_ok(self) -> bool:
        return self.theory_precondition_lhs <= THEORY_PRECONDITION_BOUND


@dataclass(frozen=True)
class EstimateReport:
    """Outcome of a full iterated robust estimation run.

    radius_trace  : tuple of (outer round, radius); the last entry is the
                    candidate radius that triggered termination.
    filter_events : tuple of (outer round, filter kind, removed count).
    diagnostics   : named scalar checks (degeneracy flags, precondition
                    values, learner convergence counters, ...).
    """

    w_hat: np.ndarray
    final_set: ActiveSet
    radius_trace: tuple
    filter_events: tuple
    diagnostics: dict


class MomentModel(ABC):
    """Per-sample moment vectors g_i(w) and their Jacobians.

    Implementations may override the batched hooks (`moments`,
    `jacobian_dot`, `mean_jacobian_over`) with vectorized versions; the
    defaults loop over `moment` / `jacobian` and define the semantics.
    """

    @property
    @abstractmethod
    def n_samples(self) -> int: ...

    @property
    @abstractmethod
    def param_dim(self) -> int: ...

    @property
    @abstractmethod
    def moment_dim(self) -> int: ...

    @abstractmethod
    def moment(self, i: int, w: np.ndarray) -> np.ndarray:
        """g_i(w), shape (moment_dim,)."""

    @abstractmethod
    def jacobian(self, i: int, w: np.ndarray) -> np.ndarray:
        """d g_i / d w, shape (moment_dim, param_dim)."""

    def moments(self, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.stack([self.moment(int(i), w) for i in idx])

    def jacobian_dot(self, idx: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Rows (d g_i / d w)^T u, shape (len(idx), param_dim)."""
        return np.stack([self.jacobian(int(i), w).T @ u for i in idx])

    def mean_jacobian_over(self, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
        acc = np.zeros((self.moment_dim, self.param_dim))
        for i in idx:
            acc += self.jacobian(int(i), w)
        return acc / len(idx)


def _check_active(model: MomentModel, S: ActiveSet) -> np.ndarray:
    if len(S) == 0:
        raise ValueError("empty active set")
    idx = S.indices
    if idx[-1] >= model.n_samples:
        raise ValueError(
            f"active set references sample {idx[-1]} but model has {model.n_samples}"
        )
    return idx


def mean_moment(model: MomentModel, S: ActiveSet, w: np.ndarray) -> np.ndarray:
    """Average moment vector over the active set, (1/|S|) sum g_i(w)."""
    idx = _check_active(model, S)
    return model.moments(idx, np.asarray(w, dtype=np.float64)).mean(axis=0)


def mean_jacobian(model: MomentModel, S: ActiveSet, w: np.ndarray) -> np.ndarray:
    """Average moment Jacobian over the active set."""
    idx = _check_active(model, S)
    return model.mean_jacobian_over(idx, np.asarray(w, dtype=np.float64))
