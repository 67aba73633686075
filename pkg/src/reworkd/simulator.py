"""Synthetic phosphor-conversion production with a counterfactual oracle.

Units are milli-chromaticity (1e-3 of the CIE 1931 scale) throughout, so
that a typical panel spreads over a few units. Latent position along the
conversion curve grows with the amount of converter deposited: lots below
the target window are under-converted and can be rescued by a rework layer,
lots near the upper edge overshoot when reworked. Emitted (cx, cy) live in a
rotated frame; the data-model PCA has to recover the main axis. The PCA
orients C_m towards rework, so it runs opposite to the latent axis here.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.special import expit

from .data_model import Dataset, fit_pca, write_csv
from .errors import ConfigError, OracleUnavailableError


@dataclass(frozen=True)
class SimConfig:
    n_lots: int = 20000
    chips_per_panel: int = 36
    # conforming chips satisfy |final position - window_center| <= window_half_width
    window_center: float = 0.0
    window_half_width: float = 2.0
    # lot position = window_center - conversion_offset - drift
    conversion_offset: float = 0.8
    drift_ar: float = 0.8
    drift_innovation_sd: float = 1.2
    chip_noise_sd: float = 0.6
    chip_spread_sd: float = 0.3
    secondary_lot_sd: float = 0.5
    secondary_chip_sd: float = 0.3
    rework_shift: float = 1.2
    shift_noise_sd: float = 0.5
    low_workload_noise_gain: float = 1.5
    invalid_rate: float = 0.05
    workload_mean: float = 40.0
    # operator rework propensity: floor + (1 - 2 floor) * logistic(index + noise),
    # index = intercept + slope_cm * (observed mean - window_center)
    #         + slope_workload * (V / workload_mean - 1)
    operator_intercept: float = -1.8
    operator_slope_cm: float = -1.1
    operator_slope_workload: float = -1.0
    operator_noise_sd: float = 0.5
    propensity_floor: float = 0.02
    downstream_noise_sd: float = 0.3
    frame_angle_deg: float = 35.0
    frame_origin: tuple[float, float] = (330.0, 340.0)
    seed: int = 0

    def validate(self) -> None:
        if self.n_lots < 1 or self.chips_per_panel < 1:
            raise ConfigError("n_lots and chips_per_panel must be positive")
        if not -1.0 < self.drift_ar < 1.0:
            raise ConfigError(f"drift_ar must lie in (-1, 1), got {self.drift_ar}")
        sds = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name.endswith("_sd")
        }
        for name, v in sds.items():
            if not v >= 0:
                raise ConfigError(f"{name} must be nonnegative, got {v}")
        if not 0.0 <= self.invalid_rate <= 0.5:
            raise ConfigError(f"invalid_rate must lie in [0, 0.5], got {self.invalid_rate}")
        if not 0.0 < self.propensity_floor < 0.5:
            raise ConfigError("propensity_floor must lie in (0, 0.5)")
        if not self.window_half_width > 0:
            raise ConfigError("window_half_width must be positive")
        if not self.workload_mean > 0:
            raise ConfigError("workload_mean must be positive")
        if self.low_workload_noise_gain < 0:
            raise ConfigError("low_workload_noise_gain must be nonnegative")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_origin"] = list(self.frame_origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator config fields: {sorted(unknown)}")
        d = dict(d)
        if "frame_origin" in d:
            d["frame_origin"] = tuple(float(v) for v in d["frame_origin"])
        return cls(**d)


def second_product_config(base: SimConfig | None = None) -> SimConfig:
    """Configuration for a second product type on the same process.

    Only the product properties change: the target window sits higher on
    the conversion curve and operators react to it with different
    coefficients.
    """
    base = base or SimConfig()
    return base.replace(
        window_center=base.window_center + 1.0,
        operator_intercept=-1.6,
        operator_slope_cm=-1.3,
    )


def randomized_config(base: SimConfig | None = None, p: float = 0.5) -> SimConfig:
    """Same process with rework assigned by a fair (or ``p``-biased) coin."""
    base = base or SimConfig()
    return base.replace(
        operator_intercept=math.log(p / (1 - p)),
        operator_slope_cm=0.0,
        operator_slope_workload=0.0,
        operator_noise_sd=0.0,
    )


@dataclass(frozen=True, eq=False)
class OracleTable:
    """Counterfactual yields per lot; never passed to estimators."""

    lot_id: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    propensity: np.ndarray
    drift: np.ndarray

    @property
    def effect(self) -> np.ndarray:
        return self.y1 - self.y0

    def select(self, lot_ids) -> "OracleTable":
        lot_ids = np.asarray(lot_ids, dtype=np.int64)
        order = np.argsort(self.lot_id, kind="stable")
        pos = np.searchsorted(self.lot_id, lot_ids, sorter=order)
        pos = np.clip(pos, 0, len(order) - 1)
        idx = order[pos]
        if not np.array_equal(self.lot_id[idx], lot_ids):
            raise OracleUnavailableError("some lot ids have no oracle entry")
        return OracleTable(lot_ids, self.y0[idx], self.y1[idx], self.propensity[idx], self.drift[idx])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lot_id", "y0", "y1", "propensity", "drift"])
            for row in zip(self.lot_id, self.y0, self.y1, self.propensity, self.drift):
                w.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "OracleTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k, t=float: np.array([t(r[k]) for r in rows])  # noqa: E731
        return cls(col("lot_id", int), col("y0"), col("y1"), col("propensity"), col("drift"))


def _window_fraction(pos: np.ndarray, valid: np.ndarray, lo: float, hi: float) -> np.ndarray:
    ok = (pos >= lo) & (pos <= hi) & valid
    return ok.sum(axis=1) / valid.sum(axis=1)


def simulate(config: SimConfig | None = None) -> tuple[Dataset, OracleTable]:
    """Generate lots and their counterfactual yields.

    Both potential yields of a lot are computed from the same chip,
    shift and downstream draws; the observed yield is the one selected by
    the realized rework decision.
    """
    cfg = config or SimConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_lots, cfg.chips_per_panel

    # latent equipment state, stationary AR(1)
    innov = rng.normal(0.0, cfg.drift_innovation_sd, n)
    stationary_sd = cfg.drift_innovation_sd / math.sqrt(1.0 - cfg.drift_ar**2)
    x0 = rng.normal(0.0, stationary_sd)
    drift, _ = lfilter([1.0], [1.0, -cfg.drift_ar], innov, zi=[cfg.drift_ar * x0])

    lot_pos = cfg.window_center - cfg.conversion_offset - drift
    spread = cfg.chip_noise_sd * np.exp(cfg.chip_spread_sd * rng.normal(size=n))
    u = lot_pos[:, None] + spread[:, None] * rng.normal(size=(n, k))
    v = cfg.secondary_lot_sd * rng.normal(size=n)[:, None] + cfg.secondary_chip_sd * rng.normal(size=(n, k))

    invalid = rng.random((n, k)) < cfg.invalid_rate
    all_bad = invalid.all(axis=1)
    invalid[all_bad, 0] = False
    valid = ~invalid

    workload = rng.poisson(cfg.workload_mean, n).astype(float)

    observed_mean = np.where(valid, u, 0.0).sum(axis=1) / valid.sum(axis=1)
    index = (
        cfg.operator_intercept
        + cfg.operator_slope_cm * (observed_mean - cfg.window_center)
        + cfg.operator_slope_workload * (workload / cfg.workload_mean - 1.0)
        + cfg.operator_noise_sd * rng.normal(size=n)
    )
    floor = cfg.propensity_floor
    propensity = floor + (1.0 - 2.0 * floor) * expit(index)
    if propensity.min() < 0.02 or propensity.max() > 0.98:
        raise ConfigError("operator model violates overlap: propensities outside [0.02, 0.98]")
    treatment = (rng.random(n) < propensity).astype(np.int64)

    low_load = np.maximum(0.0, 1.0 - workload / cfg.workload_mean)
    shift_sd = cfg.shift_noise_sd * (1.0 + cfg.low_workload_noise_gain * low_load)
    shift = cfg.rework_shift + shift_sd * rng.normal(size=n)
    downstream = cfg.downstream_noise_sd * rng.normal(size=(n, k))

    lo = cfg.window_center - cfg.window_half_width
    hi = cfg.window_center + cfg.window_half_width
    y0 = _window_fraction(u + downstream, valid, lo, hi)
    y1 = _window_fraction(u + shift[:, None] + downstream, valid, lo, hi)
    y = np.where(treatment == 1, y1, y0)

    angle = math.radians(cfg.frame_angle_deg)
    c, s = math.cos(angle), math.sin(angle)
    cx = cfg.frame_origin[0] + c * u - s * v
    cy = cfg.frame_origin[1] + s * u + c * v
    cx[invalid] = np.nan
    cy[invalid] = np.nan

    lot_id = np.arange(n, dtype=np.int64)
    d = Dataset(cx, cy, invalid, workload, treatment, y, lot_id)
    d = d.with_pca(fit_pca(d.mean_points, d.treatment))
    return d, OracleTable(lot_id, y0, y1, propensity, drift)


def write_simulation(d: Dataset, oracle: OracleTable, out_dir, config: SimConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(d, out / "data.csv")
    oracle.write_csv(out / "oracle.csv")
    (out / "sim_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def _require(oracle) -> OracleTable:
    if not isinstance(oracle, OracleTable):
        raise OracleUnavailableError("counterfactual oracle is only available for simulated data")
    return oracle


def oracle_ate(oracle: OracleTable, lot_ids=None) -> float:
    o = _require(oracle)
    if lot_ids is not None:
        o = o.select(lot_ids)
    return float(o.effect.mean())


def oracle_att(oracle: OracleTable, d: Dataset) -> float:
    o = _require(oracle).select(d.lot_id)
    treated = d.treatment == 1
    return float(o.effect[treated].mean())


def oracle_cate(oracle: OracleTable, lot_ids, z, edges) -> list[float | None]:
    """Mean true effect of lots binned by ``z``; ``None`` for empty bins."""
    o = _require(oracle).select(lot_ids)
    z = np.asarray(z, dtype=float)
    edges = np.asarray(edges, dtype=float)
    which = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, len(edges) - 2)
    inside = (z >= edges[0]) & (z <= edges[-1])
    out: list[float | None] = []
    for b in range(len(edges) - 1):
        m = inside & (which == b)
        out.append(float(o.effect[m].mean()) if m.any() else None)
    return out


def oracle_policy_value(oracle: OracleTable, decisions, cost: float = 0.0, lot_ids=None) -> float:
    """Mean of decision * (Y(1) - Y(0) - cost): value against never reworking."""
    o = _require(oracle)
    if lot_ids is not None:
        o = o.select(lot_ids)
    pi = np.asarray(decisions, dtype=float)
    return float(np.mean(pi * (o.effect - cost)))
