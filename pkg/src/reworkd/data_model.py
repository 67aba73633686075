"""Lot records, the color PCA, overlap subsampling and train/eval splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataValidationError,
    DegenerateCovarianceError,
    DegenerateRecordError,
    FeatureError,
    OverlapError,
    ParameterError,
    ParseError,
    SchemaError,
)

N_CHIPS = 36

CHIP_COLUMNS = {
    "cx": [f"cx_{j:02d}" for j in range(N_CHIPS)],
    "cy": [f"cy_{j:02d}" for j in range(N_CHIPS)],
    "valid": [f"valid_{j:02d}" for j in range(N_CHIPS)],
}
CSV_COLUMNS = CHIP_COLUMNS["cx"] + CHIP_COLUMNS["cy"] + CHIP_COLUMNS["valid"] + [
    "workload",
    "treatment",
    "yield",
]

CM_COLUMNS = [f"cm_{j:02d}" for j in range(N_CHIPS)]
CS_COLUMNS = [f"cs_{j:02d}" for j in range(N_CHIPS)]
SUMMARY_COLUMNS = ["cm_mean", "cs_mean", "cm_var", "invalid_count", "workload"]
FEATURE_NAMES = CM_COLUMNS + CS_COLUMNS + SUMMARY_COLUMNS


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LotRecord:
    """One production lot as seen at the rework decision."""

    cx: np.ndarray
    cy: np.ndarray
    invalid_flags: np.ndarray
    workload: float
    treatment: int
    yield_frac: float
    invalid_count: int | None = None

    def __post_init__(self):
        cx = np.asarray(self.cx, dtype=float)
        cy = np.asarray(self.cy, dtype=float)
        flags = np.asarray(self.invalid_flags, dtype=bool)
        if not (cx.shape == cy.shape == flags.shape) or cx.ndim != 1:
            raise DataValidationError("cx, cy and invalid_flags must be vectors of equal length")
        count = int(flags.sum())
        if self.invalid_count is not None and int(self.invalid_count) != count:
            raise DataValidationError(
                f"invalid_count={self.invalid_count} disagrees with sum of flags ({count})"
            )
        if self.treatment not in (0, 1):
            raise DataValidationError(f"treatment must be 0 or 1, got {self.treatment!r}")
        if not 0.0 <= float(self.yield_frac) <= 1.0:
            raise DataValidationError(f"yield_frac must lie in [0, 1], got {self.yield_frac!r}")
        if float(self.workload) < 0:
            raise DataValidationError(f"workload must be nonnegative, got {self.workload!r}")
        object.__setattr__(self, "cx", _readonly(cx))
        object.__setattr__(self, "cy", _readonly(cy))
        object.__setattr__(self, "invalid_flags", _readonly(flags))
        object.__setattr__(self, "invalid_count", count)

    @property
    def k(self) -> int:
        return self.cx.shape[0]


def mean_color_points(record: LotRecord) -> tuple[float, float]:
    """Mean (cx, cy) over the valid chips of a lot."""
    valid = ~record.invalid_flags
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateRecordError("all chip measurements of the lot are invalid")
    return (
        float(record.cx[valid].sum() / n_valid),
        float(record.cy[valid].sum() / n_valid),
    )


def _masked_means(cx: np.ndarray, cy: np.ndarray, invalid: np.ndarray) -> np.ndarray:
    valid = ~invalid
    n_valid = valid.sum(axis=1)
    if np.any(n_valid == 0):
        rows = np.flatnonzero(n_valid == 0)
        raise DegenerateRecordError(f"all chip measurements invalid in rows {rows[:10].tolist()}")
    mx = np.where(valid, cx, 0.0).sum(axis=1) / n_valid
    my = np.where(valid, cy, 0.0).sum(axis=1) / n_valid
    return np.column_stack([mx, my])


@dataclass(frozen=True, eq=False)
class PcaTransform:
    """Centered 2x2 rotation of chromaticity coordinates onto (C_m, C_s)."""

    mean: np.ndarray
    rotation: np.ndarray
    sign_convention: str = "loading"
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.mean) @ self.rotation

    def invert(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=float)
        return s @ self.rotation.T + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "sign_convention": self.sign_convention,
            "eigenvalues": [float(v) for v in self.eigenvalues],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PcaTransform":
        return cls(
            mean=_readonly(np.asarray(d["mean"], dtype=float)),
            rotation=_readonly(np.asarray(d["rotation"], dtype=float)),
            sign_convention=d.get("sign_convention", "loading"),
            eigenvalues=_readonly(np.asarray(d.get("eigenvalues", [0.0, 0.0]), dtype=float)),
        )


def fit_pca(points, treatment=None) -> PcaTransform:
    """Fit the two-component PCA of lot mean color points.

    Parameters
    ----------
    points : array_like, shape (n, 2)
        Mean color points (c̄x, c̄y).
    treatment : array_like, optional
        Rework indicator. When given, the first component is oriented so
        that its scores correlate nonnegatively with treatment; otherwise
        its first loading is made nonnegative.

    Returns
    -------
    PcaTransform
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
        raise ParameterError("fit_pca needs an (n >= 2, 2) array of points")
    mean = p.mean(axis=0)
    centered = p - mean
    cov = centered.T @ centered / (p.shape[0] - 1)
    if np.allclose(cov, 0.0, atol=0.0, rtol=0.0) or np.trace(cov) <= 0:
        raise DegenerateCovarianceError("all points are identical")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    convention = "loading"
    flip = evecs[0, 0] < 0
    if treatment is not None:
        a = np.asarray(treatment, dtype=float)
        scores = centered @ evecs[:, 0]
        if a.std() > 0 and scores.std() > 0:
            convention = "treatment"
            flip = np.corrcoef(scores, a)[0, 1] < 0
    if flip:
        evecs[:, 0] = -evecs[:, 0]
    # keep a proper rotation (det = +1)
    if np.linalg.det(evecs) < 0:
        evecs[:, 1] = -evecs[:, 1]
    return PcaTransform(_readonly(mean), _readonly(evecs), convention, _readonly(evals))


def apply_pca(t: PcaTransform, item):
    """Transform a lot record or raw point(s) into (C_m, C_s) coordinates.

    For a :class:`LotRecord` returns ``(chip_scores, mean_scores)`` where
    ``chip_scores`` has shape (k, 2) (NaN rows for invalid chips) and
    ``mean_scores`` is the transformed mean color point. Anything else is
    treated as point(s) with trailing dimension 2.
    """
    if isinstance(item, LotRecord):
        chips = t.apply(np.column_stack([item.cx, item.cy]))
        chips[item.invalid_flags] = np.nan
        return chips, t.apply(np.asarray(mean_color_points(item)))
    return t.apply(item)


class Dataset:
    """Immutable collection of lots with the derived feature matrix.

    Raw chip measurements are held as (n, k) arrays; ``records`` exposes
    them as :class:`LotRecord` objects. The feature matrix is available
    once a :class:`PcaTransform` is attached.
    """

    def __init__(self, cx, cy, invalid, workload, treatment, yield_frac, lot_id=None, pca=None):
        cx = np.asarray(cx, dtype=float)
        cy = np.asarray(cy, dtype=float)
        invalid = np.asarray(invalid, dtype=bool)
        if cx.ndim != 2 or cx.shape != cy.shape or cx.shape != invalid.shape:
            raise DataValidationError("cx, cy and invalid must be (n, k) arrays of equal shape")
        n = cx.shape[0]
        workload = np.asarray(workload, dtype=float).reshape(-1)
        treatment = np.asarray(treatment).reshape(-1)
        yield_frac = np.asarray(yield_frac, dtype=float).reshape(-1)
        for name, arr in (("workload", workload), ("treatment", treatment), ("yield", yield_frac)):
            if arr.shape[0] != n:
                raise DataValidationError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if not np.all(np.isin(treatment, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(treatment, (0, 1)))[0])
            raise DataValidationError(f"treatment must be 0 or 1, got {treatment[bad].item()!r}", row=bad + 1)
        if np.any((yield_frac < 0) | (yield_frac > 1)) or np.any(np.isnan(yield_frac)):
            bad = int(np.flatnonzero(~((yield_frac >= 0) & (yield_frac <= 1)))[0])
            raise DataValidationError(f"yield must lie in [0, 1], got {float(yield_frac[bad])!r}", row=bad + 1)
        if np.any(workload < 0) or np.any(np.isnan(workload)):
            raise DataValidationError("workload must be nonnegative")
        # NaN readings are only allowed on invalid chips
        invalid = invalid | np.isnan(cx) | np.isnan(cy)
        lot_id = np.arange(n) if lot_id is None else np.asarray(lot_id, dtype=np.int64)
        self.cx = _readonly(cx)
        self.cy = _readonly(cy)
        self.invalid = _readonly(invalid)
        self.workload = _readonly(workload)
        self.treatment = _readonly(treatment.astype(np.int64))
        self.yield_frac = _readonly(yield_frac)
        self.lot_id = _readonly(lot_id)
        self.pca = pca

    @property
    def n(self) -> int:
        return self.cx.shape[0]

    @property
    def k(self) -> int:
        return self.cx.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def invalid_count(self) -> np.ndarray:
        return self.invalid.sum(axis=1)

    @cached_property
    def mean_points(self) -> np.ndarray:
        return _masked_means(self.cx, self.cy, self.invalid)

    def record(self, i: int) -> LotRecord:
        return LotRecord(
            cx=self.cx[i],
            cy=self.cy[i],
            invalid_flags=self.invalid[i],
            workload=float(self.workload[i]),
            treatment=int(self.treatment[i]),
            yield_frac=float(self.yield_frac[i]),
        )

    @cached_property
    def records(self) -> list[LotRecord]:
        return [self.record(i) for i in range(self.n)]

    def with_pca(self, pca: PcaTransform) -> "Dataset":
        return Dataset(
            self.cx, self.cy, self.invalid, self.workload, self.treatment,
            self.yield_frac, self.lot_id, pca,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.cx[idx], self.cy[idx], self.invalid[idx], self.workload[idx],
            self.treatment[idx], self.yield_frac[idx], self.lot_id[idx], self.pca,
        )

    @property
    def feature_names(self) -> list[str]:
        return list(FEATURE_NAMES)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        if self.pca is None:
            raise FeatureError("feature matrix needs a fitted PCA transform (use with_pca)")
        n, k = self.cx.shape
        chips = self.pca.apply(np.stack([self.cx, self.cy], axis=-1))
        means = self.pca.apply(self.mean_points)
        valid = ~self.invalid
        cm = np.where(valid, chips[..., 0], means[:, [0]])
        cs = np.where(valid, chips[..., 1], means[:, [1]])
        n_valid = valid.sum(axis=1)
        dev = np.where(valid, chips[..., 0] - means[:, [0]], 0.0)
        cm_var = (dev**2).sum(axis=1) / n_valid
        out = np.column_stack([
            cm, cs, means[:, 0], means[:, 1], cm_var,
            self.invalid_count.astype(float), self.workload,
        ])
        out.setflags(write=False)
        return out

    def columns(self, names: Sequence[str]) -> np.ndarray:
        index = {name: j for j, name in enumerate(FEATURE_NAMES)}
        missing = [c for c in names if c not in index]
        if missing:
            raise FeatureError(f"unknown feature column(s): {missing}")
        return self.feature_matrix[:, [index[c] for c in names]]

    def column(self, name: str) -> np.ndarray:
        return self.columns([name])[:, 0]


def load_csv(path, schema: Mapping[str, str] | None = None, pca: PcaTransform | None = None) -> Dataset:
    """Read lots from CSV and derive the feature matrix.

    ``schema`` maps logical column names (``cx_00``, ..., ``workload``,
    ``treatment``, ``yield``, optional ``lot_id``) to header names in the
    file. Validity columns are optional; a NaN or empty reading marks the
    chip invalid. Without ``pca`` a transform is fitted on the file.
    """
    schema = dict(schema or {})
    col = lambda logical: schema.get(logical, logical)  # noqa: E731
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("cx_00", "empty file: no header row") from None
        rows = [r for r in reader if r]
    pos = {name.strip(): j for j, name in enumerate(header)}
    required = CHIP_COLUMNS["cx"] + CHIP_COLUMNS["cy"] + ["workload", "treatment", "yield"]
    for logical in required:
        if col(logical) not in pos:
            raise SchemaError(col(logical))
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataValidationError(f"expected {len(header)} fields, found {len(r)}", row=i + 1)

    def numeric(logical: str, allow_empty: bool = False) -> np.ndarray:
        j = pos[col(logical)]
        raw = [r[j].strip() for r in rows]
        out = np.empty(len(raw))
        for i, s in enumerate(raw):
            if s == "" and allow_empty:
                out[i] = np.nan
                continue
            try:
                out[i] = float(s)
            except ValueError:
                raise ParseError(i + 1, col(logical), s) from None
        return out

    cx = np.column_stack([numeric(c, True) for c in CHIP_COLUMNS["cx"]]) if rows else np.empty((0, N_CHIPS))
    cy = np.column_stack([numeric(c, True) for c in CHIP_COLUMNS["cy"]]) if rows else np.empty((0, N_CHIPS))
    invalid = np.isnan(cx) | np.isnan(cy)
    for j, c in enumerate(CHIP_COLUMNS["valid"]):
        if col(c) in pos:
            v = numeric(c)
            bad = ~np.isin(v, (0.0, 1.0))
            if np.any(bad):
                raise DataValidationError(f"{col(c)} must be 0 or 1", row=int(np.flatnonzero(bad)[0]) + 1)
            invalid[:, j] |= v == 0.0
    workload = numeric("workload")
    treatment = numeric("treatment")
    yld = numeric("yield")
    bad = np.flatnonzero(~np.isin(treatment, (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(f"treatment must be 0 or 1, got {float(treatment[bad[0]])!r}", row=int(bad[0]) + 1)
    bad = np.flatnonzero(~((yld >= 0.0) & (yld <= 1.0)))
    if bad.size:
        raise DataValidationError(f"yield must lie in [0, 1], got {float(yld[bad[0]])!r}", row=int(bad[0]) + 1)
    bad = np.flatnonzero(~(workload >= 0.0))
    if bad.size:
        raise DataValidationError(f"workload must be nonnegative, got {float(workload[bad[0]])!r}", row=int(bad[0]) + 1)
    bad = np.flatnonzero(invalid.all(axis=1))
    if bad.size:
        raise DegenerateRecordError(f"row {int(bad[0]) + 1}: all chip measurements are invalid")
    lot_id = numeric("lot_id").astype(np.int64) if col("lot_id") in pos else None
    d = Dataset(cx, cy, invalid, workload, treatment.astype(np.int64), yld, lot_id)
    if pca is None:
        pca = fit_pca(d.mean_points, d.treatment)
    return d.with_pca(pca)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(d: Dataset, path) -> None:
    """Write a dataset in the ``load_csv`` schema (plus ``lot_id``)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lot_id"] + CSV_COLUMNS)
        for i in range(d.n):
            cx = [_fmt(v) if not inv else "" for v, inv in zip(d.cx[i], d.invalid[i])]
            cy = [_fmt(v) if not inv else "" for v, inv in zip(d.cy[i], d.invalid[i])]
            valid = ["0" if inv else "1" for inv in d.invalid[i]]
            w.writerow(
                [str(int(d.lot_id[i]))] + cx + cy + valid
                + [_fmt(d.workload[i]), str(int(d.treatment[i])), _fmt(d.yield_frac[i])]
            )


@dataclass(frozen=True)
class SubsampleReport:
    kept: np.ndarray
    lower: float
    upper: float
    n_before: int

    @property
    def n_dropped(self) -> int:
        return self.n_before - int(self.kept.size)

    def to_dict(self) -> dict:
        return {
            "lower": float(self.lower),
            "upper": float(self.upper),
            "n_before": self.n_before,
            "n_dropped": self.n_dropped,
            "kept": [int(i) for i in self.kept],
        }


def subsample_overlap(d: Dataset, q_treated_low: float = 0.01, q_control_high: float = 0.995):
    """Keep lots whose mean main color lies in the two-group overlap window.

    The window runs from the ``q_treated_low`` quantile of C̄_m among
    reworked lots to the ``q_control_high`` quantile among untreated lots
    (linear interpolation between order statistics).

    Returns
    -------
    (Dataset, SubsampleReport)
    """
    if not (0.0 <= q_treated_low <= 1.0 and 0.0 <= q_control_high <= 1.0):
        raise ParameterError("quantiles must lie in [0, 1]")
    a = d.treatment
    if a.sum() == 0 or a.sum() == d.n:
        raise OverlapError("both treatment groups must be nonempty")
    cm = d.column("cm_mean")
    lower = float(np.quantile(cm[a == 1], q_treated_low))
    upper = float(np.quantile(cm[a == 0], q_control_high))
    if lower > upper:
        raise OverlapError(f"empty overlap interval [{lower:.6g}, {upper:.6g}]")
    keep = np.flatnonzero((cm >= lower) & (cm <= upper))
    kept_a = a[keep]
    if kept_a.sum() == 0 or kept_a.sum() == keep.size:
        raise OverlapError("a treatment group is empty after subsampling")
    return d.subset(keep), SubsampleReport(keep, lower, upper, d.n)


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    eval_indices: np.ndarray
    train_fraction: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "train_indices": [int(i) for i in self.train_indices],
            "eval_indices": [int(i) for i in self.eval_indices],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitPlan":
        return cls(
            np.asarray(d["train_indices"], dtype=np.int64),
            np.asarray(d["eval_indices"], dtype=np.int64),
            float(d["train_fraction"]),
            int(d["seed"]),
        )


def train_eval_split(d, frac: float = 0.7, seed: int = 0) -> SplitPlan:
    """Random partition of rows into a policy-fitting and an evaluation part."""
    n = d if isinstance(d, (int, np.integer)) else len(d)
    if not 0.0 < frac < 1.0:
        raise ParameterError(f"train fraction must lie in (0, 1), got {frac}")
    if n < 10:
        raise ParameterError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(frac * n + 0.5))
    return SplitPlan(np.sort(perm[:n_train]), np.sort(perm[n_train:]), frac, int(seed))
