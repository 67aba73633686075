"""Cross-fitted nuisances, AIPW scores and ATE/ATT estimates in the IRM."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data_model import Dataset
from .errors import EstimandUndefinedError, FoldDegeneracyError, ParameterError, ShapeError
from .learners import FoldAssignment, LearnerSpec, fit_classifier, fit_regressor, kfold_split
from .seeding import derive_seed

CLIP_BOUNDS = (0.025, 0.975)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("REWORKD_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    g0_hat: np.ndarray
    g1_hat: np.ndarray
    m_hat_raw: np.ndarray
    m_hat: np.ndarray
    folds: FoldAssignment | None
    clip_bounds: tuple[float, float] = CLIP_BOUNDS
    clipped_count: int = 0
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_arrays(cls, g0, g1, m_raw, clip_bounds=CLIP_BOUNDS, folds=None) -> "NuisanceEstimates":
        """Wrap externally supplied nuisance values, applying the clipping."""
        m_raw = np.asarray(m_raw, dtype=float)
        n = m_raw.shape[0]
        g0 = np.broadcast_to(np.asarray(g0, dtype=float), (n,)).copy()
        g1 = np.broadcast_to(np.asarray(g1, dtype=float), (n,)).copy()
        m, count = clip_propensity(m_raw, *clip_bounds)
        return cls(g0, g1, m_raw, m, folds, tuple(clip_bounds), count)

    @property
    def n(self) -> int:
        return self.m_hat.shape[0]

    def g_observed(self, a) -> np.ndarray:
        """ĝ(A_i, X_i) at the realized treatment."""
        a = np.asarray(a)
        return np.where(a == 1, self.g1_hat, self.g0_hat)

    def riesz(self, a) -> np.ndarray:
        """Riesz representer A/m̂ - (1-A)/(1-m̂) of the ATE."""
        a = np.asarray(a, dtype=float)
        return a / self.m_hat - (1 - a) / (1 - self.m_hat)

    def write_csv(self, path, lot_id, extra: dict | None = None) -> None:
        extra = extra or {}
        cols = {
            "lot_id": [str(int(v)) for v in lot_id],
            "fold": [str(int(v)) for v in self.folds.fold_of] if self.folds is not None else [""] * self.n,
            "g0_hat": [repr(float(v)) for v in self.g0_hat],
            "g1_hat": [repr(float(v)) for v in self.g1_hat],
            "m_hat_raw": [repr(float(v)) for v in self.m_hat_raw],
            "m_hat": [repr(float(v)) for v in self.m_hat],
        }
        for k, v in extra.items():
            cols[k] = [repr(float(x)) for x in v]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            w.writerows(zip(*cols.values()))

    @classmethod
    def read_csv(cls, path, clip_bounds=CLIP_BOUNDS, k: int | None = None, seed: int = 0):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda name: np.array([float(r[name]) for r in rows])  # noqa: E731
        folds = None
        if rows and rows[0]["fold"] != "":
            fold_of = np.array([int(r["fold"]) for r in rows], dtype=np.int64)
            folds = FoldAssignment(k or int(fold_of.max()) + 1, fold_of, seed)
        m_raw, m = col("m_hat_raw"), col("m_hat")
        count = int(np.sum(m_raw != m))
        lot_id = np.array([int(r["lot_id"]) for r in rows], dtype=np.int64)
        extra = {name: col(name) for name in (rows[0].keys() if rows else []) if name not in
                 ("lot_id", "fold", "g0_hat", "g1_hat", "m_hat_raw", "m_hat")}
        nu = cls(col("g0_hat"), col("g1_hat"), m_raw, m, folds, tuple(clip_bounds), count)
        return nu, lot_id, extra


def clip_propensity(m_raw, lo: float = 0.025, hi: float = 0.975):
    """Clamp propensities to [lo, hi]; returns (clipped, number modified)."""
    if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0):
        raise ParameterError("clip bounds must lie in (0, 1)")
    if lo >= hi:
        raise ParameterError(f"lower clip bound {lo} must be below upper bound {hi}")
    m_raw = np.asarray(m_raw, dtype=float)
    m = np.clip(m_raw, lo, hi)
    return m, int(np.count_nonzero(m != m_raw))


def crossfit_arrays(
    X, a, y,
    g_spec: LearnerSpec,
    m_spec: LearnerSpec,
    k: int = 5,
    seed: int = 0,
    clip_bounds=CLIP_BOUNDS,
    folds: FoldAssignment | None = None,
) -> NuisanceEstimates:
    """Cross-fit ĝ(0,·), ĝ(1,·) and m̂ on raw arrays.

    For fold ``f`` the outcome models are trained on the treated and the
    untreated rows outside ``f`` respectively and the propensity model on
    all rows outside ``f``; only rows of ``f`` receive those predictions.
    Learner seeds depend on (seed, fold, nuisance) only, never on the data.
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(a).astype(np.int64)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if a.shape[0] != n or y.shape[0] != n:
        raise ShapeError("X, a and y must have the same number of rows")
    n1 = int(a.sum())
    if n1 < k or n - n1 < k:
        raise FoldDegeneracyError(-1, f"each treatment group needs at least k={k} rows")
    folds = folds or kfold_split(n, k, seed)
    g0 = np.empty(n)
    g1 = np.empty(n)
    m_raw = np.empty(n)

    def run(f: int):
        tr, te = folds.train_test(f)
        a_tr = a[tr]
        t1, t0 = tr[a_tr == 1], tr[a_tr == 0]
        if t1.size < 2 or t0.size < 2:
            raise FoldDegeneracyError(f, "training complement lacks one treatment class")
        gs1 = g_spec.with_seed(derive_seed(seed, "g1", f))
        gs0 = g_spec.with_seed(derive_seed(seed, "g0", f))
        ms = m_spec.with_seed(derive_seed(seed, "m", f))
        model1 = fit_regressor(gs1, X[t1], y[t1])
        model0 = fit_regressor(gs0, X[t0], y[t0])
        model_m = fit_classifier(ms, X[tr], a_tr)
        warns = [f"fold {f} {name}: {w}" for name, mdl in (("g1", model1), ("g0", model0), ("m", model_m))
                 for w in mdl.warnings]
        return f, te, model1.predict(X[te]), model0.predict(X[te]), model_m.predict(X[te]), warns

    workers = min(max_workers(), folds.k)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(folds.k)))
    else:
        results = [run(f) for f in range(folds.k)]
    warnings: list[str] = []
    for f, te, p1, p0, pm, warns in results:
        g1[te], g0[te], m_raw[te] = p1, p0, pm
        warnings.extend(warns)
    m, count = clip_propensity(m_raw, *clip_bounds)
    return NuisanceEstimates(g0, g1, m_raw, m, folds, tuple(clip_bounds), count, tuple(warnings))


def crossfit_nuisances(
    d: Dataset,
    g_spec: LearnerSpec,
    m_spec: LearnerSpec,
    k: int = 5,
    seed: int = 0,
    columns=None,
    clip_bounds=CLIP_BOUNDS,
) -> NuisanceEstimates:
    """Cross-fit nuisances on a dataset's feature matrix (or a column subset)."""
    X = d.feature_matrix if columns is None else d.columns(list(columns))
    return crossfit_arrays(X, d.treatment, d.yield_frac, g_spec, m_spec, k, seed, clip_bounds)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    psi_a: np.ndarray
    psi_b: np.ndarray
    target: str = "ATE"

    @property
    def n(self) -> int:
        return self.psi_b.shape[0]

    def subset(self, idx) -> "ScoreSet":
        return ScoreSet(self.psi_a[idx], self.psi_b[idx], self.target)


@dataclass(frozen=True)
class EffectEstimate:
    theta_hat: float
    std_err: float
    ci: tuple[float, float]
    n: int
    alpha: float = 0.05
    target: str = "ATE"
    estimator: str = "IRM"

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "estimator": self.estimator,
            "coef": self.theta_hat,
            "std_err": self.std_err,
            "ci_low": self.ci[0],
            "ci_high": self.ci[1],
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, d) -> "EffectEstimate":
        return cls(float(d["coef"]), float(d["std_err"]), (float(d["ci_low"]), float(d["ci_high"])),
                   int(d["n"]), target=d.get("target", "ATE"), estimator=d.get("estimator", "IRM"))


def normal_ci(theta: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    z = float(norm.ppf(1 - alpha / 2))
    return (float(theta - z * se), float(theta + z * se))


def aipw_scores(d: Dataset, nu: NuisanceEstimates) -> ScoreSet:
    """Orthogonal ATE score components; psi_a is identically -1."""
    a = np.asarray(d.treatment, dtype=float)
    y = np.asarray(d.yield_frac, dtype=float)
    if nu.n != a.shape[0]:
        raise ShapeError(f"nuisances cover {nu.n} rows, dataset has {a.shape[0]}")
    g0, g1, m = nu.g0_hat, nu.g1_hat, nu.m_hat
    psi_b = g1 - g0 + a * (y - g1) / m - (1 - a) * (y - g0) / (1 - m)
    return ScoreSet(np.full(a.shape[0], -1.0), psi_b, "ATE")


def att_scores(d: Dataset, nu: NuisanceEstimates) -> ScoreSet:
    """Doubly robust ATT score normalized by the treated share."""
    a = np.asarray(d.treatment, dtype=float)
    y = np.asarray(d.yield_frac, dtype=float)
    p = a.mean()
    if p == 0:
        raise EstimandUndefinedError("ATT undefined: no treated rows")
    g0, m = nu.g0_hat, nu.m_hat
    r0 = y - g0
    psi_b = (a * r0 - m * (1 - a) * r0 / (1 - m)) / p
    return ScoreSet(-a / p, psi_b, "ATT")


def estimate_effect(s: ScoreSet, alpha: float = 0.05) -> EffectEstimate:
    """Solve mean(psi_a)·θ + mean(psi_b) = 0 with the sandwich standard error."""
    n = s.n
    if n < 2:
        raise ParameterError("need at least two scores")
    j = float(np.mean(s.psi_a))
    if j == 0:
        raise EstimandUndefinedError("mean of psi_a is zero")
    theta = -float(np.mean(s.psi_b)) / j
    psi = s.psi_a * theta + s.psi_b
    se = math.sqrt(float(np.sum(psi**2)) / (n - 1)) / abs(j) / math.sqrt(n)
    return EffectEstimate(theta, se, normal_ci(theta, se, alpha), n, alpha, s.target, "IRM")


def estimate_ate(s: ScoreSet, alpha: float = 0.05) -> EffectEstimate:
    if s.target != "ATE":
        raise ParameterError(f"estimate_ate needs ATE scores, got {s.target}")
    return estimate_effect(s, alpha)


def estimate_att(s: ScoreSet, alpha: float = 0.05) -> EffectEstimate:
    if s.target != "ATT":
        raise ParameterError(f"estimate_att needs ATT scores, got {s.target}")
    return estimate_effect(s, alpha)


def naive_ate(d: Dataset, alpha: float = 0.05) -> EffectEstimate:
    """Difference in group means with the unpooled (Welch) standard error."""
    a = np.asarray(d.treatment)
    y = np.asarray(d.yield_frac, dtype=float)
    y1, y0 = y[a == 1], y[a == 0]
    if y1.size == 0 or y0.size == 0:
        raise EstimandUndefinedError("naive ATE needs both treatment groups")
    theta = float(y1.mean() - y0.mean())
    v1 = y1.var(ddof=1) / y1.size if y1.size > 1 else 0.0
    v0 = y0.var(ddof=1) / y0.size if y0.size > 1 else 0.0
    se = math.sqrt(v1 + v0)
    return EffectEstimate(theta, se, normal_ci(theta, se, alpha), int(a.size), alpha, "ATE", "naive")
