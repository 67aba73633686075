"""Overlap and balance diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import FEATURE_NAMES, Dataset
from .errors import ParameterError, ShapeError

PSB_THRESHOLD = 0.2


@dataclass(frozen=True)
class BalanceEntry:
    covariate: str
    psb_treated: float | None  # None when the covariate has zero variance
    psb_control: float | None

    @property
    def applicable(self) -> bool:
        return self.psb_treated is not None

    def passes(self, threshold: float = PSB_THRESHOLD) -> tuple[bool | None, bool | None]:
        if not self.applicable:
            return None, None
        return self.psb_treated < threshold, self.psb_control < threshold


@dataclass(frozen=True)
class BalanceReport:
    entries: tuple[BalanceEntry, ...]
    threshold: float = PSB_THRESHOLD
    control_weighting: str = "literal"

    def entry(self, covariate: str) -> BalanceEntry:
        for e in self.entries:
            if e.covariate == covariate:
                return e
        raise KeyError(covariate)

    @property
    def max_psb(self) -> float:
        vals = [v for e in self.entries if e.applicable for v in (e.psb_treated, e.psb_control)]
        return max(vals) if vals else 0.0

    @property
    def all_pass(self) -> bool:
        return all(all(e.passes(self.threshold)) for e in self.entries if e.applicable)

    def write_csv(self, path) -> None:
        fmt = lambda v: "NA" if v is None else repr(float(v))  # noqa: E731
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "A=1", "A=0", "pass_A=1", "pass_A=0"])
            for e in self.entries:
                p1, p0 = e.passes(self.threshold)
                w.writerow([e.covariate, fmt(e.psb_treated), fmt(e.psb_control),
                            "NA" if p1 is None else str(p1).lower(), "NA" if p0 is None else str(p0).lower()])


def psb_arrays(X, a, m_hat, names: Sequence[str], control_weighting: str = "literal",
               threshold: float = PSB_THRESHOLD) -> BalanceReport:
    """PSB_a = |X̄_a − X̄| / σ²_X per covariate.

    X̄_a is the mean of X over group a weighted by 1/m̂ (``literal``) or, for
    the control group, by 1/(1 − m̂) (``complement``); X̄ is the unweighted
    mean and σ² the sample variance (ddof 1). The denominator is a variance,
    so the score scales as 1/s when a covariate is multiplied by s.
    """
    if control_weighting not in ("literal", "complement"):
        raise ParameterError("control_weighting must be 'literal' or 'complement'")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    a = np.asarray(a).astype(np.int64)
    m = np.asarray(m_hat, dtype=float)
    if not (X.shape[0] == a.shape[0] == m.shape[0]):
        raise ShapeError("X, A and m_hat must have the same number of rows")
    if np.any(m <= 0) or np.any(m >= 1):
        raise ParameterError("m_hat must lie strictly inside (0, 1)")
    w1 = (a == 1) / m
    w0 = (a == 0) / ((1 - m) if control_weighting == "complement" else m)
    entries = []
    for j, name in enumerate(names):
        x = X[:, j]
        var = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
        if var <= 0 or w1.sum() == 0 or w0.sum() == 0:
            entries.append(BalanceEntry(name, None, None))
            continue
        overall = float(x.mean())
        mean1 = float(np.sum(w1 * x) / np.sum(w1))
        mean0 = float(np.sum(w0 * x) / np.sum(w0))
        entries.append(BalanceEntry(name, abs(mean1 - overall) / var, abs(mean0 - overall) / var))
    return BalanceReport(tuple(entries), threshold, control_weighting)


def psb(d: Dataset, m_hat, covariates: Sequence[str] | None = None, control_weighting: str = "literal",
        threshold: float = PSB_THRESHOLD) -> BalanceReport:
    names = list(covariates) if covariates is not None else list(FEATURE_NAMES)
    return psb_arrays(d.columns(names), d.treatment, m_hat, names, control_weighting, threshold)


@dataclass(frozen=True)
class OverlapHistogram:
    covariate: str
    edges: np.ndarray
    counts_treated: np.ndarray
    counts_control: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "treated", "control"])
            for i in range(self.counts_treated.size):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            int(self.counts_treated[i]), int(self.counts_control[i])])


def histogram_arrays(x, a, bins: int = 30, covariate: str = "x") -> OverlapHistogram:
    """Per-group counts on shared equal-width edges over the pooled range."""
    if bins < 2:
        raise ParameterError("need at least two bins")
    x = np.asarray(x, dtype=float)
    a = np.asarray(a).astype(np.int64)
    lo, hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    c1, _ = np.histogram(x[a == 1], edges)
    c0, _ = np.histogram(x[a == 0], edges)
    return OverlapHistogram(covariate, edges, c1, c0)


def overlap_histograms(d: Dataset, covariate: str = "cm_mean", bins: int = 30) -> OverlapHistogram:
    return histogram_arrays(d.column(covariate), d.treatment, bins, covariate)
