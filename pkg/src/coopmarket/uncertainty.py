"""Uncertainty sets, data-sharing budgets, support functions and samplers.

A box set uses per-dimension half-widths; an ellipsoid set is
{d : (d-c)^T Q (d-c) <= r} with Q symmetric positive definite and budget
r > 0.  Supports are closed-form; samplers back the Monte Carlo feasibility
checks.  The factor convention is Q = L^T L with L upper triangular, so the
support of a over the ellipsoid is a^T c + sqrt(r) * ||L^{-T} a||_2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite
from .model import Coalition, ValidationReport

_SYM_TOL = 1e-10
_PIVOT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BoxSet:
    """Origin-centred box |d_j| <= dpw_max_j."""

    dpw_max: np.ndarray

    def __post_init__(self):
        arr = np.array(self.dpw_max, dtype=float)
        if np.any(arr < 0):
            raise ValueError("box half-widths must be >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "dpw_max", arr)

    @property
    def dim(self) -> int:
        return self.dpw_max.shape[0]


class CholFactor:
    """Upper-triangular L with Q = L^T L, plus cached triangular solves."""

    def __init__(self, L: np.ndarray, Q: np.ndarray):
        self.L = L
        self.Q = Q

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def inv_t_apply(self, a: np.ndarray) -> np.ndarray:
        """Return L^{-T} a (solves L^T y = a)."""
        return solve_triangular(self.L, a, trans="T", lower=False)

    def inv_apply(self, a: np.ndarray) -> np.ndarray:
        """Return L^{-1} a."""
        return solve_triangular(self.L, a, lower=False)


def cholesky(Q: np.ndarray) -> CholFactor:
    """Factor a symmetric positive-definite Q as L^T L, L upper triangular.

    numpy returns the lower factor of Q = M M^T; its transpose is the upper L
    with L^T L = Q.  Raises NotPositiveDefinite on breakdown or when a pivot
    falls below 1e-12.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionMismatch(f"shape matrix must be square, got {Q.shape}")
    if np.max(np.abs(Q - Q.T)) > _SYM_TOL * max(1.0, np.max(np.abs(Q))):
        raise NotPositiveDefinite("shape matrix is not symmetric")
    try:
        M = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky breakdown: {exc}") from exc
    if np.min(np.diag(M)) ** 2 <= _PIVOT_TOL:
        raise NotPositiveDefinite("pivot below 1e-12; matrix numerically singular")
    L = M.T.copy()
    resid = np.max(np.abs(L.T @ L - Q))
    if resid > 1e-10 * max(1.0, np.max(np.abs(Q))):
        raise NotPositiveDefinite(f"factor residual {resid:.3e} too large")
    return CholFactor(L, Q)


@dataclass(frozen=True, eq=False)
class EllipsoidSet:
    """Ellipsoid {d : (d-c)^T Q (d-c) <= r}."""

    c: np.ndarray
    Q: np.ndarray
    r: float = 1.0
    chol: CholFactor = field(init=False, repr=False)

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        Q = np.array(self.Q, dtype=float)
        if self.r <= 0:
            raise ValueError("budget r must be > 0")
        if c.shape != (Q.shape[0],):
            raise DimensionMismatch(f"center {c.shape} vs shape matrix {Q.shape}")
        factor = cholesky(Q)
        c.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "chol", factor)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def with_budget(self, r: float) -> "EllipsoidSet":
        return EllipsoidSet(self.c, self.Q, r)

    def quad_value(self, d: np.ndarray) -> np.ndarray:
        """(d-c)^T Q (d-c) for one point or a batch of rows."""
        dd = np.atleast_2d(d) - self.c
        return np.einsum("ij,jk,ik->i", dd, self.Q, dd)


def support_box(a: np.ndarray, box: BoxSet) -> float:
    """max a^T d over the box: sum |a_j| * dpw_max_j."""
    a = np.asarray(a, dtype=float)
    if a.shape != box.dpw_max.shape:
        raise DimensionMismatch(f"vector {a.shape} vs box {box.dpw_max.shape}")
    return float(np.abs(a) @ box.dpw_max)


def support_ellipsoid(a: np.ndarray, e: EllipsoidSet) -> float:
    """max a^T d over the ellipsoid: a^T c + sqrt(r) * ||L^{-T} a||_2."""
    a = np.asarray(a, dtype=float)
    if a.shape != (e.dim,):
        raise DimensionMismatch(f"vector {a.shape} vs ellipsoid dim {e.dim}")
    return float(a @ e.c + np.sqrt(e.r) * np.linalg.norm(e.chol.inv_t_apply(a)))


def sample_ellipsoid(e: EllipsoidSet, n: int, seed: int, mode: str = "boundary") -> np.ndarray:
    """Draw n points from the ellipsoid, deterministically for a given seed.

    boundary: Gaussian direction, normalised, mapped through sqrt(r) * L^{-1}
    and shifted by the center, so every point satisfies the quadratic with
    equality.  interior: boundary points scaled by u^(1/dim), u uniform.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in ("boundary", "interior"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, e.dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    if mode == "interior":
        g *= rng.random(n)[:, None] ** (1.0 / e.dim)
    # u on the unit sphere maps to c + sqrt(r) L^{-1} u on the boundary
    pts = np.sqrt(e.r) * e.chol.inv_apply(g.T).T + e.c
    return pts


@dataclass(frozen=True, eq=False)
class DataContribution:
    """Short-term data budget: k_h minus the contributions of joined subsets.

    ``terms`` maps frozen sets of player indices to k values >= 0; default
    usage is singleton keys.  The effective budget of coalition C is
    k_h - sum of k over stored subsets of C, so sharing data always shrinks
    the uncertainty set.
    """

    k_h: float
    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        norm = {frozenset(k): float(v) for k, v in self.terms.items()}
        object.__setattr__(self, "terms", norm)

    def validate_into(self, report: ValidationReport, n_players: int):
        if self.k_h <= 0:
            report.error("EmptyBudget", f"k_h = {self.k_h} must be > 0")
        total = 0.0
        for key, v in self.terms.items():
            if v < 0:
                report.error("EmptyBudget", f"contribution k_{set(key)} = {v} negative")
            if any(i < 0 or i >= n_players for i in key):
                report.error("DimensionMismatch", f"contribution key {set(key)} out of range")
            total += v
        if self.k_h - total <= 0:
            report.error(
                "EmptyBudget",
                f"k_h - sum of contributions = {self.k_h - total:.6g} <= 0; "
                "some coalition would have a non-positive budget",
            )
        if len(self.terms) > 2 * n_players:
            report.warn(
                "ManyContributionTerms",
                f"{len(self.terms)} subset terms for {n_players} players; "
                "expected at most 2N",
            )


def effective_budget(d: DataContribution, coalition: Coalition) -> float:
    """Budget r(C) = k_h - sum of contributions of subsets of C.

    Monotone nonincreasing in C; the empty coalition keeps the full
    historical budget.
    """
    members = set(coalition.members())
    reduction = sum(v for key, v in d.terms.items() if key <= members)
    return d.k_h - reduction


class BoxUncertainty:
    """Marker model: per-DRG boxes taken from each DrgSpec's half-widths."""

    kind = "box"

    def validate_into(self, report: ValidationReport, n_dims: int, horizon: int):
        pass

    def __eq__(self, other):
        return isinstance(other, BoxUncertainty)


class EllipsoidUncertainty:
    """Scenario-level ellipsoid family over DRG deviation space.

    coupling "per_period": one W-dimensional ellipsoid per period (shapes is
    a list of T matrices, centers a (T, W) array); the data budget applies to
    each period separately.  coupling "joint": a single (T*W)-dimensional
    space-time ellipsoid, dimension order period-major (index t*W + j), with
    one budget across the horizon.
    """

    kind = "ellipsoid"

    def __init__(self, shapes, centers=None, coupling: str = "per_period"):
        if coupling not in ("per_period", "joint"):
            raise ValueError(f"unknown coupling {coupling!r}")
        self.coupling = coupling
        if coupling == "per_period":
            self.shapes = tuple(np.array(q, dtype=float) for q in shapes)
            w = self.shapes[0].shape[0] if self.shapes else 0
            if centers is None:
                centers = np.zeros((len(self.shapes), w))
            self.centers = np.array(centers, dtype=float)
        else:
            self.shapes = (np.array(shapes, dtype=float),)
            tw = self.shapes[0].shape[0]
            if centers is None:
                centers = np.zeros(tw)
            self.centers = np.array(centers, dtype=float)
        for a in self.shapes:
            a.setflags(write=False)
        self.centers.setflags(write=False)

    def validate_into(self, report: ValidationReport, n_dims: int, horizon: int):
        if self.coupling == "per_period":
            if len(self.shapes) != horizon:
                report.error(
                    "DimensionMismatch",
                    f"{len(self.shapes)} shape matrices for horizon {horizon}",
                )
                return
            expected = (horizon, n_dims)
            if self.centers.shape != expected:
                report.error(
                    "DimensionMismatch",
                    f"centers shaped {self.centers.shape}, expected {expected}",
                )
            mats = self.shapes
            dim = n_dims
        else:
            dim = horizon * n_dims
            mats = self.shapes
            if self.centers.shape != (dim,):
                report.error(
                    "DimensionMismatch",
                    f"joint center shaped {self.centers.shape}, expected ({dim},)",
                )
        for t, q in enumerate(mats):
            if q.shape != (dim, dim):
                report.error(
                    "DimensionMismatch",
                    f"shape matrix {t} is {q.shape}, expected ({dim}, {dim})",
                )
                continue
            try:
                cholesky(q)
            except NotPositiveDefinite as exc:
                report.error("NonPositiveDefiniteShape", f"shape matrix {t}: {exc}")
        if np.max(np.abs(self.centers), initial=0.0) > 0:
            report.warn(
                "NonZeroCenter",
                "ellipsoid center is not zero; superadditivity and core "
                "guarantees assume symmetric (zero-centred) deviation sets",
            )

    def ellipsoid(self, t: int, budget: float) -> EllipsoidSet:
        """Period-t ellipsoid (per_period) or the joint ellipsoid (any t)."""
        if self.coupling == "per_period":
            return EllipsoidSet(self.centers[t], self.shapes[t], budget)
        return EllipsoidSet(self.centers, self.shapes[0], budget)

    def factor(self, t: int) -> CholFactor:
        """Cholesky factor of the period-t (or joint) shape matrix, cached."""
        cache = getattr(self, "_factors", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_factors", cache)
        key = 0 if self.coupling == "joint" else t
        if key not in cache:
            cache[key] = cholesky(self.shapes[key])
        return cache[key]

    def center(self, t: int) -> np.ndarray:
        return self.centers if self.coupling == "joint" else self.centers[t]

    def support(self, t: int, a: np.ndarray, budget: float) -> float:
        """max a^T d over the period-t set at the given budget (cached factor)."""
        f = self.factor(t)
        return float(a @ self.center(t) + np.sqrt(budget) * np.linalg.norm(f.inv_t_apply(a)))
