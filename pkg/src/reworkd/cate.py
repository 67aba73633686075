"""Conditional effects by projecting orthogonal scores on spline bases.

The score part psi_b is regressed on a B-spline basis b(z) of a few
conditioning variables; the coefficients give θ̂(z) = b(z)ᵀβ̂ with an HC0
sandwich covariance. Pointwise bands come from a Gaussian multiplier
bootstrap of the projection residuals.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSupportError,
    ExtrapolationError,
    ParameterError,
    ShapeError,
    SingularityError,
)

log = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-8


@dataclass(frozen=True, eq=False)
class AxisBasis:
    """Clamped B-spline basis on one axis; ``df`` columns including the constant."""

    degree: int
    df: int
    knots: np.ndarray
    boundary: tuple[float, float]

    @property
    def full_knots(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate([[lo] * (self.degree + 1), self.knots, [hi] * (self.degree + 1)])

    def evaluate(self, x) -> np.ndarray:
        """Cox-de Boor recursion; x must already lie inside the boundary."""
        x = np.asarray(x, dtype=float).reshape(-1)
        t = self.full_knots
        n_int = len(t) - 1
        lo, hi = self.boundary
        B = np.zeros((x.size, n_int))
        # degree 0: half-open spans, the right boundary joins the last nonempty span
        last = max(i for i in range(n_int) if t[i] < t[i + 1])
        for i in range(n_int):
            if t[i] < t[i + 1]:
                B[:, i] = (x >= t[i]) & (x < t[i + 1])
        B[x >= hi, :] = 0.0
        B[x >= hi, last] = 1.0
        for p in range(1, self.degree + 1):
            nxt = np.zeros((x.size, n_int - p))
            for i in range(n_int - p):
                d1 = t[i + p] - t[i]
                d2 = t[i + p + 1] - t[i + 1]
                term = np.zeros(x.size)
                if d1 > 0:
                    term += (x - t[i]) / d1 * B[:, i]
                if d2 > 0:
                    term += (t[i + p + 1] - x) / d2 * B[:, i + 1]
                nxt[:, i] = term
            B = nxt
        return B

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "df": self.df,
            "knots": [float(v) for v in self.knots],
            "boundary": [float(v) for v in self.boundary],
        }

    @classmethod
    def from_dict(cls, d) -> "AxisBasis":
        return cls(int(d["degree"]), int(d["df"]), np.asarray(d["knots"], dtype=float),
                   (float(d["boundary"][0]), float(d["boundary"][1])))


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """One- or two-dimensional (tensor product) B-spline basis."""

    axes: tuple[AxisBasis, ...]

    @property
    def dims(self) -> int:
        return len(self.axes)

    @property
    def degree(self):
        return self.axes[0].degree if self.dims == 1 else tuple(a.degree for a in self.axes)

    @property
    def df(self):
        return self.axes[0].df if self.dims == 1 else tuple(a.df for a in self.axes)

    @property
    def knots(self):
        return self.axes[0].knots if self.dims == 1 else tuple(a.knots for a in self.axes)

    @property
    def boundary(self):
        return self.axes[0].boundary if self.dims == 1 else tuple(a.boundary for a in self.axes)

    @property
    def n_columns(self) -> int:
        return int(np.prod([a.df for a in self.axes]))

    def _as_columns(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.dims == 1:
            return z.reshape(-1, 1)
        if z.ndim == 2 and z.shape[1] == self.dims:
            return z
        if isinstance(z, np.ndarray) and z.ndim == 2 and z.shape[0] == self.dims:
            return z.T
        raise ShapeError(f"expected points with {self.dims} coordinates")

    def clamp(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Clamp points to the boundary; also returns a per-row out-of-range flag."""
        zc = self._as_columns(z).copy()
        flag = np.zeros(zc.shape[0], dtype=bool)
        for j, ax in enumerate(self.axes):
            lo, hi = ax.boundary
            flag |= (zc[:, j] < lo) | (zc[:, j] > hi)
            zc[:, j] = np.clip(zc[:, j], lo, hi)
        return zc, flag

    def design(self, z) -> np.ndarray:
        zc, _ = self.clamp(z)
        B = self.axes[0].evaluate(zc[:, 0])
        for j in range(1, self.dims):
            Bj = self.axes[j].evaluate(zc[:, j])
            B = (B[:, :, None] * Bj[:, None, :]).reshape(B.shape[0], -1)
        return B

    def to_dict(self) -> dict:
        return {"type": "bspline", "axes": [a.to_dict() for a in self.axes]}


@dataclass(frozen=True, eq=False)
class IndicatorBasis:
    """One indicator column per level; the saturated basis for discrete z."""

    levels: np.ndarray

    @property
    def n_columns(self) -> int:
        return len(self.levels)

    @property
    def dims(self) -> int:
        return 1

    def clamp(self, z):
        z = np.asarray(z, dtype=float).reshape(-1, 1)
        return z, ~np.isin(z[:, 0], self.levels)

    def design(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        return (z[:, None] == np.asarray(self.levels, dtype=float)[None, :]).astype(float)

    def to_dict(self) -> dict:
        return {"type": "indicator", "levels": [float(v) for v in self.levels]}


def basis_from_dict(d):
    if d["type"] == "indicator":
        return IndicatorBasis(np.asarray(d["levels"], dtype=float))
    return SplineBasis(tuple(AxisBasis.from_dict(a) for a in d["axes"]))


def _axis(z: np.ndarray, degree: int, df: int) -> AxisBasis:
    if df <= degree:
        raise ParameterError(f"df ({df}) must exceed the degree ({degree})")
    z = np.asarray(z, dtype=float)
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        raise DegenerateSupportError("conditioning variable is constant")
    n_int = df - degree - 1
    probs = np.arange(1, n_int + 1) / (n_int + 1)
    knots = np.quantile(z, probs) if n_int else np.empty(0)
    return AxisBasis(degree, df, np.asarray(knots, dtype=float), (lo, hi))


def build_basis(z, degree: int = 3, df: int = 5) -> SplineBasis:
    """B-spline basis with interior knots at equally spaced quantiles of z.

    ``z`` is a vector (one axis) or a pair of vectors / (n, 2) array, in
    which case the basis is the tensor product of per-axis bases.
    """
    if isinstance(z, (tuple, list)) and len(z) == 2 and np.ndim(z[0]) == 1:
        cols = [np.asarray(z[0], dtype=float), np.asarray(z[1], dtype=float)]
    else:
        arr = np.asarray(z, dtype=float)
        cols = [arr] if arr.ndim == 1 else [arr[:, j] for j in range(arr.shape[1])]
    if len(cols) not in (1, 2):
        raise ParameterError("only one- and two-dimensional bases are supported")
    return SplineBasis(tuple(_axis(c, degree, df) for c in cols))


@dataclass(frozen=True, eq=False)
class CateFit:
    basis: object
    beta_hat: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray | None = None
    z_columns: tuple[str, ...] = ()
    bread: np.ndarray | None = None
    design: np.ndarray | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "beta_hat": [float(v) for v in self.beta_hat],
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "z_columns": list(self.z_columns),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d) -> "CateFit":
        return cls(
            basis_from_dict(d["basis"]),
            np.asarray(d["beta_hat"], dtype=float),
            np.asarray(d["vcov"], dtype=float),
            z_columns=tuple(d.get("z_columns", ())),
            warnings=tuple(d.get("warnings", ())),
        )


def project_scores(psi_b, basis, z, z_columns: Sequence[str] = ()) -> CateFit:
    """Least-squares projection of psi_b on b(z) with HC0 covariance."""
    psi_b = np.asarray(psi_b, dtype=float).reshape(-1)
    B = basis.design(z)
    if B.shape[0] != psi_b.shape[0]:
        raise ShapeError(f"basis has {B.shape[0]} rows, scores have {psi_b.shape[0]}")
    d = B.shape[1]
    BtB = B.T @ B
    warnings: list[str] = []
    if np.linalg.matrix_rank(BtB) < d:
        BtB = BtB + RIDGE_FALLBACK * np.eye(d)
        warnings.append("rank-deficient basis design; ridge 1e-8 added")
        log.debug(warnings[-1])
        if np.linalg.cond(BtB) > 1.0 / np.finfo(float).eps:
            raise SingularityError("basis design is singular even after the ridge fallback")
    bread = np.linalg.inv(BtB)
    beta = bread @ (B.T @ psi_b)
    resid = psi_b - B @ beta
    meat = (B * resid[:, None] ** 2).T @ B
    vcov = bread @ meat @ bread
    vcov = 0.5 * (vcov + vcov.T)
    return CateFit(basis, beta, vcov, resid, tuple(z_columns), bread, B, tuple(warnings))


def cate_predict(fit: CateFit, z_eval, return_flag: bool = False):
    """θ̂(z) and its pointwise standard error; points outside the fitting
    range are clamped to the boundary (flagged when ``return_flag``)."""
    _, flag = fit.basis.clamp(z_eval)
    Bz = fit.basis.design(z_eval)
    theta = Bz @ fit.beta_hat
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Bz, fit.vcov, Bz), 0.0, None))
    if return_flag:
        return theta, se, flag
    return theta, se


@dataclass(frozen=True, eq=False)
class ConfidenceBand:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float = 0.05
    n_bootstrap: int = 1000
    level_convention: str = "2alpha"
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            g = np.asarray(self.grid)
            if g.ndim == 1:
                w.writerow(["grid", "estimate", "lower", "upper"])
                for row in zip(g, self.estimate, self.lower, self.upper):
                    w.writerow([repr(float(v)) for v in row])
            else:
                w.writerow(["grid_1", "grid_2", "estimate", "lower", "upper"])
                for (g1, g2), e, lo, hi in zip(g, self.estimate, self.lower, self.upper):
                    w.writerow([repr(float(v)) for v in (g1, g2, e, lo, hi)])

    @classmethod
    def read_csv(cls, path, alpha: float = 0.05, n_bootstrap: int = 1000) -> "ConfidenceBand":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        grid = col("grid") if rows and "grid" in rows[0] else np.column_stack([col("grid_1"), col("grid_2")])
        return cls(grid, col("estimate"), col("lower"), col("upper"), alpha, n_bootstrap)


def multiplier_bootstrap_band(
    fit: CateFit, grid, alpha: float = 0.05, n_boot: int = 1000, seed: int = 0, chunk: int = 100
) -> ConfidenceBand:
    """Pointwise band from β* = β̂ + (BᵀB)⁻¹Bᵀ(ξ ⊙ ε̂) with ξ ~ N(0, 1).

    Bounds are the α and 1-α replicate quantiles, so the two-sided level is
    2α. Bounds are widened to include the point estimate if needed.
    """
    if fit.residuals is None or fit.design is None:
        raise ParameterError("bootstrap needs a fit that still holds its residuals")
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    warnings = []
    if n_boot < 100:
        warnings.append(f"only {n_boot} bootstrap replicates")
    grid = np.asarray(grid, dtype=float)
    G = fit.basis.design(grid)
    est = G @ fit.beta_hat
    rng = np.random.default_rng(seed)
    weighted = fit.design * fit.residuals[:, None]  # rows b(z_i) ε̂_i
    draws = np.empty((G.shape[0], n_boot))
    done = 0
    while done < n_boot:
        c = min(chunk, n_boot - done)
        xi = rng.standard_normal((c, fit.design.shape[0]))
        delta = (xi @ weighted) @ fit.bread.T
        draws[:, done:done + c] = est[:, None] + G @ delta.T
        done += c
    lower = np.quantile(draws, alpha, axis=1)
    upper = np.quantile(draws, 1 - alpha, axis=1)
    lower = np.minimum(lower, est)
    upper = np.maximum(upper, est)
    return ConfidenceBand(grid, est, lower, upper, alpha, n_boot, "2alpha", tuple(warnings))


def cate_lower_bound(band: ConfidenceBand, z):
    """Linear interpolation of the band's lower curve (1-D bands only)."""
    g = np.asarray(band.grid, dtype=float)
    if g.ndim != 1:
        raise ParameterError("lower-bound interpolation needs a one-dimensional band")
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < g[0]) or np.any(z_arr > g[-1]):
        raise ExtrapolationError(f"query outside band grid [{g[0]:.6g}, {g[-1]:.6g}]")
    out = np.interp(z_arr, g, band.lower)
    return float(out) if out.ndim == 0 else out
