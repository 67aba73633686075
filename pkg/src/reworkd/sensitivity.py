"""Omitted-variable-bias bounds, robustness values and benchmarking.

The bias bound for a scenario (ζ_y, ζ_d, ρ) is

    B = |ρ| · σ̂ · ν̂ · sqrt(ζ_y · ζ_d / (1 − ζ_d)),

with σ̂² the mean squared outcome residual and ν̂² the mean squared Riesz
representer of the target moment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .data_model import FEATURE_NAMES, Dataset
from .dml_irm import CLIP_BOUNDS, NuisanceEstimates, ScoreSet, aipw_scores, crossfit_arrays, estimate_effect
from .errors import EmptyAdjustmentError, FeatureError, ParameterError, ShapeError
from .learners import LearnerSpec

BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200
RV_UPPER = 1.0 - 1e-9


@dataclass(frozen=True)
class ConfoundingScenario:
    zeta_y: float
    zeta_d: float
    rho: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.zeta_y < 1.0:
            raise ParameterError(f"zeta_y must lie in [0, 1), got {self.zeta_y}")
        if not 0.0 <= self.zeta_d < 1.0:
            raise ParameterError(f"zeta_d must lie in [0, 1), got {self.zeta_d}")
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")


def bias_bound(sigma: float, nu: float, sc: ConfoundingScenario) -> float:
    return abs(sc.rho) * sigma * nu * math.sqrt(sc.zeta_y * sc.zeta_d / (1.0 - sc.zeta_d))


def score_scales(nu: NuisanceEstimates, d: Dataset, weights=None) -> tuple[float, float]:
    """(σ̂, ν̂) for the ATE moment, or the policy moment when ``weights`` = π."""
    y = np.asarray(d.yield_frac, dtype=float)
    if nu.n != y.shape[0]:
        raise ShapeError(f"nuisances cover {nu.n} rows, dataset has {y.shape[0]}")
    resid = y - nu.g_observed(d.treatment)
    alpha = nu.riesz(d.treatment)
    if weights is not None:
        alpha = alpha * np.asarray(weights, dtype=float)
    return math.sqrt(float(np.mean(resid**2))), math.sqrt(float(np.mean(alpha**2)))


def ovb_bound(scores: ScoreSet, nu: NuisanceEstimates, d: Dataset, sc: ConfoundingScenario, weights=None) -> float:
    if scores.target != "ATE":
        raise ParameterError("bias bounds need ATE scores")
    sigma, nu_norm = score_scales(nu, d, weights)
    return bias_bound(sigma, nu_norm, sc)


def _solve_rv(theta: float, scale: float) -> tuple[float, bool]:
    """Root of θ − scale·r/sqrt(1−r) on [0, 1−1e-9]; flag if it is not bracketed."""
    if theta <= 0:
        return 0.0, False
    f = lambda r: theta - scale * r / math.sqrt(1.0 - r)  # noqa: E731
    lo, hi = 0.0, RV_UPPER
    if f(hi) > 0:
        return hi, True
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < BISECT_TOL:
            break
    return 0.5 * (lo + hi), False


def _rv_pair(theta: float, se: float, scale: float, alpha: float) -> tuple[float, float, list[str]]:
    flags = []
    t = abs(theta)
    if theta == 0:
        flags.append("estimate is exactly zero; rv set to 0")
    if theta < 0:
        flags.append("negative estimate; robustness values computed for |theta|")
    if scale == 0 and t > 0:
        flags.append("zero score dispersion; bound is identically zero")
        return RV_UPPER, RV_UPPER if t - norm.ppf(1 - alpha) * se > 0 else 0.0, flags
    rv, capped = _solve_rv(t, scale)
    t_lo = t - norm.ppf(1 - alpha) * se
    rva, capped_a = _solve_rv(t_lo, scale) if t_lo > 0 else (0.0, False)
    if capped or capped_a:
        flags.append("robustness value capped at 1 - 1e-9")
    return rv, rva, flags


def robustness_value(scores: ScoreSet, nu: NuisanceEstimates, d: Dataset, alpha: float = 0.05,
                     weights=None) -> tuple[float, float]:
    """(RV, RVa): equal confounding strengths ζ_y = ζ_d (ρ = 1) that move the
    estimate, or its one-sided 1−α confidence bound, to zero."""
    theta, se = _moment_estimate(scores, weights)
    sigma, nu_norm = score_scales(nu, d, weights)
    rv, rva, _ = _rv_pair(theta, se, sigma * nu_norm, alpha)
    return rv, rva


def _moment_estimate(scores: ScoreSet, weights=None) -> tuple[float, float]:
    if scores.target != "ATE":
        raise ParameterError("sensitivity analysis needs ATE scores")
    psi_b = scores.psi_b if weights is None else np.asarray(weights, dtype=float) * scores.psi_b
    est = estimate_effect(ScoreSet(-np.ones_like(psi_b), psi_b, "ATE"))
    return est.theta_hat, est.std_err


@dataclass(frozen=True)
class ContourGrid:
    zeta_y: np.ndarray
    zeta_d: np.ndarray
    lower: np.ndarray  # lower[i, j] at (zeta_y[i], zeta_d[j])
    theta_hat: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["zeta_y", "zeta_d", "lower_bound"])
            for i, zy in enumerate(self.zeta_y):
                for j, zd in enumerate(self.zeta_d):
                    w.writerow([repr(float(zy)), repr(float(zd)), repr(float(self.lower[i, j]))])

    @classmethod
    def read_csv(cls, path) -> "ContourGrid":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(float(r["zeta_y"]), float(r["zeta_d"]), float(r["lower_bound"])) for r in csv.DictReader(fh)]
        zy = np.unique([r[0] for r in rows])
        zd = np.unique([r[1] for r in rows])
        lower = np.array([r[2] for r in rows]).reshape(zy.size, zd.size)
        return cls(zy, zd, lower, float(lower[0, 0]))


def contour_grid(scores: ScoreSet, nu: NuisanceEstimates, d: Dataset, zeta_y_grid=None, zeta_d_grid=None,
                 weights=None) -> ContourGrid:
    """θ̂ − B(ζ_y, ζ_d, ρ = 1) over a grid in [0, 1)²."""
    zy = np.linspace(0.0, 0.4, 41) if zeta_y_grid is None else np.asarray(zeta_y_grid, dtype=float)
    zd = np.linspace(0.0, 0.4, 41) if zeta_d_grid is None else np.asarray(zeta_d_grid, dtype=float)
    for g in (zy, zd):
        if g.size and (g.min() < 0 or g.max() >= 1):
            raise ParameterError("contour grid must lie in [0, 1)")
    theta, _ = _moment_estimate(scores, weights)
    sigma, nu_norm = score_scales(nu, d, weights)
    lower = np.empty((zy.size, zd.size))
    for i, a in enumerate(zy):
        for j, b in enumerate(zd):
            lower[i, j] = theta - bias_bound(sigma, nu_norm, ConfoundingScenario(float(a), float(b), 1.0))
    return ContourGrid(zy, zd, lower, theta)


@dataclass(frozen=True)
class BenchmarkRow:
    name: str
    omitted: tuple[str, ...]
    zeta_y: float
    zeta_d: float
    rho: float
    delta_theta: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "omitted": list(self.omitted),
            "zeta_y": self.zeta_y,
            "zeta_d": self.zeta_d,
            "rho": self.rho,
            "delta_theta": self.delta_theta,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d) -> "BenchmarkRow":
        return cls(d["name"], tuple(d["omitted"]), d["zeta_y"], d["zeta_d"], d["rho"], d["delta_theta"],
                   tuple(d.get("flags", ())))


@dataclass(frozen=True)
class BenchmarkConfig:
    g_spec: LearnerSpec
    m_spec: LearnerSpec
    k: int = 5
    seed: int = 0
    clip_bounds: tuple[float, float] = CLIP_BOUNDS
    columns: tuple[str, ...] = tuple(FEATURE_NAMES)


def _r2(y, g) -> float:
    var = float(np.var(y))
    return 1.0 - float(np.mean((y - g) ** 2)) / var if var > 0 else 0.0


def benchmark_arrays(
    X, names: Sequence[str], a, y, omit: Sequence[str], config: BenchmarkConfig,
    long: NuisanceEstimates | None = None, weights=None, name: str = "",
) -> BenchmarkRow:
    """Benchmark row from refitting nuisances without the ``omit`` columns.

    ζ_y is the relative gain in outcome R², ζ_d the relative gain in the
    squared Riesz norm, ρ the correlation of the long-minus-short outcome
    and Riesz differences, Δθ = θ̂_long − θ̂_short.
    """
    X = np.asarray(X, dtype=float)
    names = list(names)
    omit = list(omit)
    if not omit:
        raise ParameterError("benchmark needs at least one omitted column")
    missing = [c for c in omit if c not in names]
    if missing:
        raise FeatureError(f"cannot omit unknown column(s): {missing}")
    keep = [j for j, c in enumerate(names) if c not in set(omit)]
    if not keep:
        raise EmptyAdjustmentError("omitting these columns leaves no adjustment set")
    a = np.asarray(a).astype(np.int64)
    y = np.asarray(y, dtype=float)
    if long is None:
        long = crossfit_arrays(X, a, y, config.g_spec, config.m_spec, config.k, config.seed, config.clip_bounds)
    short = crossfit_arrays(X[:, keep], a, y, config.g_spec, config.m_spec, config.k, config.seed,
                            config.clip_bounds, folds=long.folds)
    w = np.ones(y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    flags: list[str] = []

    g_l, g_s = long.g_observed(a), short.g_observed(a)
    r2_l, r2_s = _r2(y, g_l), _r2(y, g_s)
    raw_zy = (r2_l - r2_s) / (1.0 - r2_l) if r2_l < 1 else 0.0
    zeta_y = float(np.clip(raw_zy, 0.0, 1.0))
    if raw_zy > 1.0:
        flags.append(f"zeta_y clamped from {raw_zy:.6g}")
    alpha_l, alpha_s = w * long.riesz(a), w * short.riesz(a)
    nu2_l, nu2_s = float(np.mean(alpha_l**2)), float(np.mean(alpha_s**2))
    raw_zd = 1.0 - nu2_s / nu2_l if nu2_l > 0 else 0.0
    zeta_d = float(np.clip(raw_zd, 0.0, 1.0))
    if zeta_d != raw_zd:
        flags.append(f"zeta_d clamped from {raw_zd:.6g}")
    dg, da = g_l - g_s, alpha_l - alpha_s
    if np.std(dg) == 0 or np.std(da) == 0:
        rho = 0.0
        flags.append("zero variance in score differences; rho set to 0")
    else:
        raw_rho = float(np.corrcoef(dg, da)[0, 1])
        rho = float(np.clip(raw_rho, -1.0, 1.0))
        if rho != raw_rho:
            flags.append("rho clamped to [-1, 1]")

    def theta(nu):
        psi_b = g_diff_score(nu, a, y)
        return float(np.mean(w * psi_b))

    return BenchmarkRow(name or "+".join(omit), tuple(omit), zeta_y, zeta_d, rho,
                        theta(long) - theta(short), tuple(flags))


def g_diff_score(nu: NuisanceEstimates, a, y) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return nu.g1_hat - nu.g0_hat + a * (y - nu.g1_hat) / nu.m_hat - (1 - a) * (y - nu.g0_hat) / (1 - nu.m_hat)


def benchmark_confounder(d: Dataset, omit: Sequence[str], config: BenchmarkConfig,
                         long: NuisanceEstimates | None = None, weights=None, name: str = "") -> BenchmarkRow:
    cols = list(config.columns)
    return benchmark_arrays(d.columns(cols), cols, d.treatment, d.yield_frac, omit, config, long, weights, name)


@dataclass(frozen=True)
class SensitivityReport:
    label: str
    theta_hat: float
    std_err: float
    bias_bound: float
    bounds: tuple[float, float]
    ci_bounds: tuple[float, float]
    rv: float
    rva: float
    scenario: ConfoundingScenario
    alpha: float = 0.05
    sigma: float = 0.0
    nu: float = 0.0
    benchmark_rows: tuple[BenchmarkRow, ...] = ()
    contour: ContourGrid | None = field(default=None, compare=False)
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "theta_hat": self.theta_hat,
            "std_err": self.std_err,
            "bias_bound": self.bias_bound,
            "bounds": list(self.bounds),
            "ci_bounds": list(self.ci_bounds),
            "rv": self.rv,
            "rva": self.rva,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "nu": self.nu,
            "scenario": {"zeta_y": self.scenario.zeta_y, "zeta_d": self.scenario.zeta_d, "rho": self.scenario.rho},
            "benchmark_rows": [b.to_dict() for b in self.benchmark_rows],
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


DEFAULT_SCENARIO = ConfoundingScenario(0.01, 0.01, 1.0)


def sensitivity_report(
    scores: ScoreSet, nu: NuisanceEstimates, d: Dataset, scenario: ConfoundingScenario = DEFAULT_SCENARIO,
    alpha: float = 0.05, weights=None, label: str = "ATE", benchmark_rows: Sequence[BenchmarkRow] = (),
    contour: ContourGrid | None = None,
) -> SensitivityReport:
    theta, se = _moment_estimate(scores, weights)
    sigma, nu_norm = score_scales(nu, d, weights)
    B = bias_bound(sigma, nu_norm, scenario)
    z = norm.ppf(1 - alpha)
    rv, rva, flags = _rv_pair(theta, se, sigma * nu_norm, alpha)
    return SensitivityReport(
        label, theta, se, B, (theta - B, theta + B), (theta - B - z * se, theta + B + z * se),
        rv, rva, scenario, alpha, sigma, nu_norm, tuple(benchmark_rows), contour, tuple(flags),
    )


def value_sensitivity(p, holdout_scores: ScoreSet, nu: NuisanceEstimates, d: Dataset,
                      scenario: ConfoundingScenario = DEFAULT_SCENARIO, alpha: float = 0.05) -> SensitivityReport:
    """Sensitivity of a policy value: moment π·ψ_b with Riesz representer π·α."""
    from .policy import decide

    pi = np.asarray(decide(p, d), dtype=float)
    rep = sensitivity_report(holdout_scores, nu, d, scenario, alpha, weights=pi, label=p.name or p.form)
    if not pi.any():
        rep = SensitivityReport(rep.label, 0.0, 0.0, 0.0, (0.0, 0.0), (0.0, 0.0), 0.0, 0.0, scenario, alpha,
                                rep.sigma, 0.0, (), None, ("policy never treats; value 0 and rv 0",))
    return rep


def ate_sensitivity(d: Dataset, nu: NuisanceEstimates, **kw) -> SensitivityReport:
    return sensitivity_report(aipw_scores(d, nu), nu, d, **kw)
