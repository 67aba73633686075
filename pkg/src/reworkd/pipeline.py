"""End-to-end analysis pipeline with file-based stages.

Every stage reads its inputs from, and writes its outputs to, the output
directory as plain CSV/JSON. ``run_pipeline`` simply runs the stages in
order, so a chain of CLI subcommands produces the same files as one run.
Stage seeds come from ``derive_seed(master_seed, stage, ...)``.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import svg
from .cate import ConfidenceBand, CateFit, build_basis, cate_predict, multiplier_bootstrap_band, project_scores
from .data_model import FEATURE_NAMES, PcaTransform, SplitPlan, load_csv, subsample_overlap, train_eval_split
from .diagnostics import histogram_arrays, overlap_histograms, psb
from .dml_irm import (
    CLIP_BOUNDS,
    NuisanceEstimates,
    aipw_scores,
    att_scores,
    crossfit_arrays,
    estimate_ate,
    estimate_att,
    naive_ate,
)
from .errors import ConfigError, DependencyError, ReworkError, StageError
from .learners import LearnerSpec, TuningRow, cross_val_predict, grid_tune, kfold_split, rmse_report
from .policy import (
    DEFAULT_COSTS,
    DEFAULT_TREE_FEATURES,
    Policy,
    PolicyEvalReport,
    conservative_policy,
    decide,
    evaluate_policy,
    fit_policy_tree,
    observed_policy,
    regret_vs_oracle,
    threshold_policy,
    tree_policy,
    write_values_table,
)
from .seeding import derive_seed
from .sensitivity import (
    BenchmarkConfig,
    ConfoundingScenario,
    benchmark_confounder,
    contour_grid,
    sensitivity_report,
    value_sensitivity,
)
from .simulator import OracleTable, SimConfig, oracle_att, oracle_ate, oracle_policy_value, simulate, write_simulation

log = logging.getLogger(__name__)

STAGES = ("simulate", "estimate", "cate", "policy", "evaluate", "sensitivity", "diagnose", "report")

DEFAULT_G_GRID = (
    LearnerSpec("ridge", {"lambda": 1.0}),
    LearnerSpec("cart", {"max_depth": 5, "min_leaf": 20}),
    LearnerSpec("boosted_stumps", {"n_stages": 100, "learning_rate": 0.1}),
)
DEFAULT_M_GRID = (
    LearnerSpec("logistic"),
    LearnerSpec("cart", {"max_depth": 4, "min_leaf": 50}),
)

BENCHMARK_GROUPS = (
    ("all_cm", tuple(c for c in FEATURE_NAMES if c.startswith("cm_"))),
    ("one_cm", ("cm_00",)),
    ("all_cs", tuple(c for c in FEATURE_NAMES if c.startswith("cs_"))),
    ("one_cs", ("cs_00",)),
    ("workload", ("workload",)),
    ("invalid", ("invalid_count",)),
)

# the rows of the values table: method name -> policy-name prefix
TABLE_METHODS = (
    ("Simple CATE", "cate1d"),
    ("CATE 2D", "cate2d"),
    ("Greedy Tree", "greedy_d2"),
    ("Exact Tree", "exact_d2"),
)


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "reworkd_out"
    seed: int = 0
    simulate: bool = True
    input_path: str | None = None
    schema: Mapping[str, str] | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    g_grid: tuple[LearnerSpec, ...] = DEFAULT_G_GRID
    m_grid: tuple[LearnerSpec, ...] = DEFAULT_M_GRID
    k_folds: int = 5
    clip_bounds: tuple[float, float] = CLIP_BOUNDS
    subsample_quantiles: tuple[float, float] = (0.01, 0.995)
    train_fraction: float = 0.7
    cate_columns_1d: tuple[str, ...] = ("cm_mean", "cs_mean", "invalid_count", "workload")
    cate_degree_1d: int = 3
    cate_columns_2d: tuple[str, str] = ("cm_mean", "cs_mean")
    cate_degree_2d: int = 2
    cate_df: int = 5
    cate_grid_points: int = 100
    cate_grid_points_2d: int = 25
    n_bootstrap: int = 1000
    band_alpha: float = 0.05
    policy_column: str = "cm_mean"
    cost_levels: tuple[float, ...] = DEFAULT_COSTS
    conservative_gammas: tuple[float, ...] = (0.01, 0.03, 0.05)
    tree_features: tuple[str, ...] = DEFAULT_TREE_FEATURES
    greedy_depths: tuple[int, ...] = (1, 2, 3, 4)
    exact_depth: int = 2
    max_candidates: int = 256
    sensitivity_scenario: tuple[float, float, float] = (0.01, 0.01, 1.0)
    sensitivity_grid_max: float = 0.4
    sensitivity_grid_points: int = 41
    benchmarks: bool = True
    hist_bins: int = 30
    psb_control_weighting: str = "literal"
    alpha: float = 0.05

    def validate(self) -> None:
        if not self.simulate and not self.input_path:
            raise ConfigError("either simulate or input_path must be set")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if not self.g_grid or not self.m_grid:
            raise ConfigError("learner grids must be nonempty")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if any(c < 0 for c in self.cost_levels) or any(g < 0 for g in self.conservative_gammas):
            raise ConfigError("costs and thresholds must be nonnegative")
        if self.exact_depth > 2:
            raise ConfigError("exact tree search supports depth at most 2")
        for c in tuple(self.cate_columns_1d) + tuple(self.cate_columns_2d) + tuple(self.tree_features) + (
                self.policy_column,):
            if c not in FEATURE_NAMES:
                raise ConfigError(f"unknown feature column {c!r}")
        if self.policy_column not in self.cate_columns_1d:
            raise ConfigError("policy_column must be one of cate_columns_1d")
        self.sim.validate()

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "sim":
                v = v.to_dict()
            elif f.name in ("g_grid", "m_grid"):
                v = [s.to_dict() for s in v]
            elif isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, Mapping):
                v = dict(v)
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config fields: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in d.items():
            if k == "sim":
                v = SimConfig.from_dict(v)
            elif k in ("g_grid", "m_grid"):
                v = tuple(LearnerSpec.from_dict(s) for s in v)
            elif isinstance(v, list):
                v = _tuple(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- file helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _require(out: Path, name: str, stage: str) -> Path:
    p = out / name
    if not p.exists():
        raise DependencyError(name, stage)
    return p


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive ownership of the output directory for one process."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise ConfigError(f"output directory {out} is locked by another run ({lock})") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# ---------------------------------------------------------------- loading

_LOAD_CACHE: dict = {}


def _file_key(path: Path):
    st = os.stat(path)
    return (str(Path(path).resolve()), st.st_mtime_ns, st.st_size)


def _data_path(cfg: PipelineConfig, out: Path) -> Path:
    if cfg.simulate:
        return _require(out, "data.csv", "simulate")
    p = Path(cfg.input_path)
    if not p.exists():
        raise ConfigError(f"input file {p} does not exist")
    return p


def _load(cfg: PipelineConfig, out: Path, pca: PcaTransform | None):
    path = _data_path(cfg, out)
    key = (_file_key(path), json.dumps(pca.to_dict(), sort_keys=True) if pca else None,
           json.dumps(dict(cfg.schema or {}), sort_keys=True))
    if key not in _LOAD_CACHE:
        _LOAD_CACHE.clear()
        _LOAD_CACHE[key] = load_csv(path, cfg.schema, pca=pca)
    return _LOAD_CACHE[key]


@dataclass
class Processed:
    full: Any  # Dataset after PCA and subsampling
    raw: Any  # Dataset before subsampling
    split: SplitPlan
    oracle: OracleTable | None

    @property
    def train(self):
        return self.full.subset(self.split.train_indices)

    @property
    def eval(self):
        return self.full.subset(self.split.eval_indices)


def load_processed(cfg: PipelineConfig, out: Path) -> Processed:
    pca = PcaTransform.from_dict(read_json(_require(out, "pca.json", "estimate")))
    raw = _load(cfg, out, pca)
    kept = np.asarray(read_json(_require(out, "subsample.json", "estimate"))["kept"], dtype=np.int64)
    split = SplitPlan.from_dict(read_json(_require(out, "split.json", "estimate")))
    oracle = OracleTable.read_csv(out / "oracle.csv") if (cfg.simulate and (out / "oracle.csv").exists()) else None
    return Processed(raw.subset(kept), raw, split, oracle)


def load_nuisances(cfg: PipelineConfig, out: Path, part: str) -> NuisanceEstimates:
    nu, _, _ = NuisanceEstimates.read_csv(_require(out, f"nuisances_{part}.csv", "estimate"), cfg.clip_bounds,
                                          cfg.k_folds)
    return nu


# ---------------------------------------------------------------- stages


def stage_simulate(cfg: PipelineConfig, out: Path) -> None:
    if not cfg.simulate:
        return
    d, oracle = simulate(cfg.sim)
    write_simulation(d, oracle, out, cfg.sim)


def tune_outcome(specs: Sequence[LearnerSpec], X, a, y, k: int, seed: int):
    """Pooled out-of-fold RMSE of g(0,·) on controls and g(1,·) on treated."""
    rows = []
    groups = [(np.flatnonzero(a == t), kfold_split(int(np.sum(a == t)), k, derive_seed(seed, "tune_g", t)))
              for t in (0, 1)]
    for spec in specs:
        try:
            sq = 0.0
            for idx, folds in groups:
                pred = cross_val_predict(spec, X[idx], y[idx], folds, classify=False)
                sq += float(np.sum((y[idx] - pred) ** 2))
            rows.append(TuningRow(spec, float(np.sqrt(sq / a.shape[0]))))
        except ReworkError as exc:
            rows.append(TuningRow(spec, float("inf"), f"{type(exc).__name__}: {exc}"))
    ok = [r for r in rows if r.error is None]
    if not ok:
        from .errors import TuningError
        raise TuningError("every outcome learner failed")
    best = min(ok, key=lambda r: r.loss)
    return best.spec, rows


def stage_estimate(cfg: PipelineConfig, out: Path) -> None:
    raw = _load(cfg, out, None)
    write_json(out / "pca.json", raw.pca.to_dict())
    d, sub = subsample_overlap(raw, *cfg.subsample_quantiles)
    write_json(out / "subsample.json", sub.to_dict())
    split = train_eval_split(d, cfg.train_fraction, derive_seed(cfg.seed, "split") % (2**32))
    write_json(out / "split.json", split.to_dict())

    train = d.subset(split.train_indices)
    Xtr, atr, ytr = train.feature_matrix, train.treatment, train.yield_frac
    tseed = derive_seed(cfg.seed, "tune")
    g_spec, g_rows = tune_outcome(cfg.g_grid, Xtr, atr, ytr, cfg.k_folds, tseed)
    m_spec, m_rows = grid_tune(cfg.m_grid, Xtr, atr, kfold_split(train.n, cfg.k_folds, derive_seed(tseed, "m")),
                               "log_loss")
    write_rows(out / "tuning.csv", ["nuisance", "learner", "loss", "error"],
               [("g", r.spec.label(), r.loss, r.error) for r in g_rows]
               + [("m", r.spec.label(), r.loss, r.error) for r in m_rows])
    write_json(out / "learners.json", {"g": g_spec.to_dict(), "m": m_spec.to_dict()})

    parts = {"full": d, "train": train, "eval": d.subset(split.eval_indices)}
    nus = {}
    for name, part in parts.items():
        nu = crossfit_arrays(part.feature_matrix, part.treatment, part.yield_frac, g_spec, m_spec, cfg.k_folds,
                             derive_seed(cfg.seed, "crossfit", name), cfg.clip_bounds)
        nu.write_csv(out / f"nuisances_{name}.csv", part.lot_id, {"psi_b": aipw_scores(part, nu).psi_b})
        nus[name] = nu

    nu = nus["full"]
    effects = {
        "naive": naive_ate(d, cfg.alpha).to_dict(),
        "ate": estimate_ate(aipw_scores(d, nu), cfg.alpha).to_dict(),
        "att": estimate_att(att_scores(d, nu), cfg.alpha).to_dict(),
        "clipped_propensities": nu.clipped_count,
        "n_before_subsample": sub.n_before,
        "n": d.n,
        "share_treated": float(np.mean(d.treatment)),
    }
    if cfg.simulate and (out / "oracle.csv").exists():
        oracle = OracleTable.read_csv(out / "oracle.csv")
        effects["oracle"] = {"ate": oracle_ate(oracle, d.lot_id), "att": oracle_att(oracle, d)}
    write_json(out / "effects.json", effects)
    write_rows(out / "effects.csv", ["estimator", "target", "coef", "std_err", "ci_low", "ci_high", "n"],
               [(e["estimator"], e["target"], e["coef"], e["std_err"], e["ci_low"], e["ci_high"], e["n"])
                for e in (effects["naive"], effects["ate"], effects["att"])])
    rm = rmse_report(nu, d)
    write_rows(out / "rmse.csv", ["nuisance", "learner", "rmse"],
               [("g0", g_spec.label(), rm["rmse_g0"]), ("g1", g_spec.label(), rm["rmse_g1"]),
                ("m", m_spec.label(), rm["rmse_m"])])


def _grid(values, points: int) -> np.ndarray:
    return np.linspace(float(np.min(values)), float(np.max(values)), points)


def stage_cate(cfg: PipelineConfig, out: Path) -> None:
    P = load_processed(cfg, out)
    nu = load_nuisances(cfg, out, "train")
    train = P.train
    psi_b = aipw_scores(train, nu).psi_b
    for col in cfg.cate_columns_1d:
        z = train.column(col)
        fit = project_scores(psi_b, build_basis(z, cfg.cate_degree_1d, cfg.cate_df), z, (col,))
        write_json(out / f"cate_1d_{col}.json", fit.to_dict())
        grid = _grid(P.full.column(col), cfg.cate_grid_points)
        band = multiplier_bootstrap_band(fit, grid, cfg.band_alpha, cfg.n_bootstrap,
                                         derive_seed(cfg.seed, "band", col))
        band.write_csv(out / f"cate_band_{col}.csv")
    c1, c2 = cfg.cate_columns_2d
    Z = train.columns([c1, c2])
    fit2 = project_scores(psi_b, build_basis(Z, cfg.cate_degree_2d, cfg.cate_df), Z, (c1, c2))
    write_json(out / "cate_2d.json", fit2.to_dict())
    g1 = _grid(P.full.column(c1), cfg.cate_grid_points_2d)
    g2 = _grid(P.full.column(c2), cfg.cate_grid_points_2d)
    G = np.array([(a, b) for b in g2 for a in g1])
    theta, se = cate_predict(fit2, G)
    write_rows(out / "cate_2d_grid.csv", [c1, c2, "estimate", "std_err"],
               [(a, b, t, s) for (a, b), t, s in zip(G, theta, se)])


def _gname(g: float) -> str:
    return f"{g:g}"


def stage_policy(cfg: PipelineConfig, out: Path) -> None:
    P = load_processed(cfg, out)
    nu = load_nuisances(cfg, out, "train")
    train = P.train
    psi_b = aipw_scores(train, nu).psi_b
    fit1 = CateFit.from_dict(read_json(_require(out, f"cate_1d_{cfg.policy_column}.json", "cate")))
    fit2 = CateFit.from_dict(read_json(_require(out, "cate_2d.json", "cate")))
    band = ConfidenceBand.read_csv(_require(out, f"cate_band_{cfg.policy_column}.csv", "cate"), cfg.band_alpha,
                                   cfg.n_bootstrap)
    Z = train.columns(list(cfg.tree_features))
    policies: list[Policy] = [observed_policy()]
    for g in cfg.cost_levels:
        policies.append(threshold_policy(fit1, g, f"cate1d_g{_gname(g)}"))
        policies.append(threshold_policy(fit2, g, f"cate2d_g{_gname(g)}"))
        for m in cfg.greedy_depths:
            tree = fit_policy_tree(Z, psi_b, g, m, "greedy", cfg.tree_features, cfg.max_candidates)
            policies.append(tree_policy(tree, f"greedy_d{m}_g{_gname(g)}"))
        tree = fit_policy_tree(Z, psi_b, g, cfg.exact_depth, "exact", cfg.tree_features, cfg.max_candidates)
        policies.append(tree_policy(tree, f"exact_d{cfg.exact_depth}_g{_gname(g)}"))
    for g in cfg.conservative_gammas:
        policies.append(conservative_policy(band, g, cfg.policy_column, f"conservative_g{_gname(g)}"))
    write_json(out / "policies.json", [p.to_dict() for p in policies])


def load_policies(out: Path) -> list[Policy]:
    return [Policy.from_dict(d) for d in read_json(_require(out, "policies.json", "policy"))]


def stage_evaluate(cfg: PipelineConfig, out: Path) -> None:
    P = load_processed(cfg, out)
    policies = load_policies(out)
    nu = load_nuisances(cfg, out, "eval")
    ev = P.eval
    scores = aipw_scores(ev, nu)
    reports = [evaluate_policy(p, scores, ev, cfg.cost_levels, cfg.alpha) for p in policies]
    write_json(out / "policy_reports.json", [r.to_dict() for r in reports])
    rows = []
    for r in reports:
        for c, v in zip(r.cost_levels, r.values):
            rows.append((r.name, c, v.ci[0], v.theta_hat, v.ci[1], v.std_err, r.share_treated,
                         r.gate.theta_hat if r.gate else None, r.gate.std_err if r.gate else None))
    write_rows(out / "policy_values.csv",
               ["policy", "cost", "ci_low", "effect", "ci_high", "std_err", "share_treated", "gate", "gate_std_err"],
               rows)
    # paper-style table: each method fitted at γ = c and evaluated at c
    by_name = {r.name: r for r in reports}
    table = []
    for label, prefix in TABLE_METHODS:
        vals = []
        for c in cfg.cost_levels:
            r = by_name.get(f"{prefix}_g{_gname(c)}")
            vals.append(r.value_at(c) if r else None)
        if all(v is not None for v in vals):
            r0 = by_name[f"{prefix}_g{_gname(cfg.cost_levels[0])}"]
            table.append(PolicyEvalReport(label, tuple(vals), r0.gate, r0.share_treated, tuple(cfg.cost_levels),
                                          r0.n))
    table.append(dataclasses.replace(by_name["observed"], name="observed value"))
    write_values_table(table, out / "values_table.csv")
    if P.oracle is not None:
        orows = []
        for p in policies:
            pi = decide(p, ev)
            regret = regret_vs_oracle(p, P.oracle, ev, class_columns=cfg.tree_features)
            for c in cfg.cost_levels:
                orows.append((p.name, c, oracle_policy_value(P.oracle, pi, c, ev.lot_id), regret))
        write_rows(out / "oracle_values.csv", ["policy", "cost", "oracle_value", "regret"], orows)


def stage_sensitivity(cfg: PipelineConfig, out: Path) -> None:
    P = load_processed(cfg, out)
    nu = load_nuisances(cfg, out, "full")
    learners = read_json(_require(out, "learners.json", "estimate"))
    bcfg = BenchmarkConfig(LearnerSpec.from_dict(learners["g"]), LearnerSpec.from_dict(learners["m"]),
                           cfg.k_folds, derive_seed(cfg.seed, "crossfit", "full"), tuple(cfg.clip_bounds))
    scenario = ConfoundingScenario(*cfg.sensitivity_scenario)
    grid = np.linspace(0.0, cfg.sensitivity_grid_max, cfg.sensitivity_grid_points)
    d = P.full
    scores = aipw_scores(d, nu)
    bench = []
    if cfg.benchmarks:
        bench = [benchmark_confounder(d, cols, bcfg, long=nu, name=name) for name, cols in BENCHMARK_GROUPS]
    ate = sensitivity_report(scores, nu, d, scenario, cfg.alpha, label="ATE", benchmark_rows=bench)
    contour = contour_grid(scores, nu, d, grid, grid)
    contour.write_csv(out / "contour_ate.csv")

    ev = P.eval
    nu_ev = load_nuisances(cfg, out, "eval")
    scores_ev = aipw_scores(ev, nu_ev)
    policies = {p.name: p for p in load_policies(out)}
    g0 = _gname(cfg.cost_levels[0])
    value_reports = []
    for label, prefix in TABLE_METHODS:
        p = policies.get(f"{prefix}_g{g0}")
        if p is not None:
            value_reports.append(value_sensitivity(p, scores_ev, nu_ev, ev, scenario, cfg.alpha))
    main = policies.get(f"cate1d_g{g0}")
    vbench = []
    if main is not None:
        pi = decide(main, ev)
        if cfg.benchmarks and pi.any():
            bcfg_ev = dataclasses.replace(bcfg, seed=derive_seed(cfg.seed, "crossfit", "eval"))
            vbench = [benchmark_confounder(ev, cols, bcfg_ev, long=nu_ev, weights=pi, name=name)
                      for name, cols in BENCHMARK_GROUPS]
        contour_grid(scores_ev, nu_ev, ev, grid, grid, weights=pi).write_csv(out / "contour_value.csv")
    write_json(out / "sensitivity.json", {
        "ate": ate.to_dict(),
        "values": [r.to_dict() for r in value_reports],
        "value_benchmarks": [b.to_dict() for b in vbench],
    })
    write_rows(out / "robustness_values.csv", ["policy", "theta_hat", "std_err", "rv", "rva"],
               [(ate.label, ate.theta_hat, ate.std_err, ate.rv, ate.rva)]
               + [(r.label, r.theta_hat, r.std_err, r.rv, r.rva) for r in value_reports])
    write_rows(out / "benchmarks.csv", ["target", "omitted", "zeta_y", "zeta_d", "rho", "delta_theta", "flags"],
               [("ATE", b.name, b.zeta_y, b.zeta_d, b.rho, b.delta_theta, "; ".join(b.flags)) for b in bench]
               + [("value", b.name, b.zeta_y, b.zeta_d, b.rho, b.delta_theta, "; ".join(b.flags)) for b in vbench])


def stage_diagnose(cfg: PipelineConfig, out: Path) -> None:
    P = load_processed(cfg, out)
    nu = load_nuisances(cfg, out, "full")
    report = psb(P.full, nu.m_hat, control_weighting=cfg.psb_control_weighting)
    report.write_csv(out / "psb.csv")
    overlap_histograms(P.full, "cm_mean", cfg.hist_bins).write_csv(out / "overlap_cm_mean.csv")
    sub = read_json(out / "subsample.json")
    h = histogram_arrays(P.raw.column("cm_mean"), P.raw.treatment, cfg.hist_bins, "cm_mean")
    h.write_csv(out / "subsampling_cm_mean.csv")
    write_json(out / "subsampling_cut.json", {"lower": sub["lower"], "upper": sub["upper"],
                                              "n_before": sub["n_before"], "n_dropped": sub["n_dropped"]})


def _hist_from_csv(path: Path):
    rows = read_rows(path)
    edges = [float(r["bin_low"]) for r in rows] + ([float(rows[-1]["bin_high"])] if rows else [])
    return edges, {"reworked": [int(r["treated"]) for r in rows], "not reworked": [int(r["control"]) for r in rows]}


def stage_report(cfg: PipelineConfig, out: Path) -> None:
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for col in cfg.cate_columns_1d:
        b = ConfidenceBand.read_csv(_require(out, f"cate_band_{col}.csv", "cate"))
        (plots / f"cate_{col}.svg").write_text(svg.line_band_svg(
            b.grid, b.estimate, b.lower, b.upper, f"CATE over {col}", col, "effect on yield"))
    rows = read_rows(_require(out, "cate_2d_grid.csv", "cate"))
    c1, c2 = cfg.cate_columns_2d
    x = np.unique([float(r[c1]) for r in rows])
    y = np.unique([float(r[c2]) for r in rows])
    M = np.array([float(r["estimate"]) for r in rows]).reshape(y.size, x.size)

    def edges(v):
        mid = (v[:-1] + v[1:]) / 2
        return np.concatenate([[v[0] - (mid[0] - v[0])], mid, [v[-1] + (v[-1] - mid[-1])]]) if v.size > 1 else \
            np.array([v[0] - 0.5, v[0] + 0.5])

    (plots / "cate_2d.svg").write_text(svg.heatmap_svg(M, edges(x), edges(y), "CATE surface", c1, c2))
    e, counts = _hist_from_csv(_require(out, "overlap_cm_mean.csv", "diagnose"))
    (plots / "overlap_cm_mean.svg").write_text(svg.grouped_histogram_svg(e, counts, "Overlap of mean C_m", "cm_mean"))
    cut = read_json(out / "subsampling_cut.json")
    e, counts = _hist_from_csv(out / "subsampling_cm_mean.csv")
    (plots / "subsampling.svg").write_text(svg.grouped_histogram_svg(
        e, counts, "Subsampling window on mean C_m", "cm_mean", {"lower": cut["lower"], "upper": cut["upper"]}))
    sens = read_json(_require(out, "sensitivity.json", "sensitivity"))
    for name in ("ate", "value"):
        path = out / f"contour_{name}.csv"
        if not path.exists():
            continue
        crow = read_rows(path)
        zy = np.unique([float(r["zeta_y"]) for r in crow])
        zd = np.unique([float(r["zeta_d"]) for r in crow])
        L = np.array([float(r["lower_bound"]) for r in crow]).reshape(zy.size, zd.size)
        levels = sorted(set(np.round(np.linspace(L.min(), L.max(), 7), 6).tolist()) | ({0.0} if L.min() < 0 else set()))
        bench = sens["ate"]["benchmark_rows"] if name == "ate" else sens["value_benchmarks"]
        pts = {b["name"]: (b["zeta_d"], b["zeta_y"]) for b in bench
               if b["zeta_y"] <= zy[-1] and b["zeta_d"] <= zd[-1]}
        # contour_svg expects Z[i, j] at (x[j], y[i]) with x = zeta_d, y = zeta_y
        (plots / f"sensitivity_{name}.svg").write_text(svg.contour_svg(
            zd, zy, L, levels, f"Lower bound of the {name} under confounding", "zeta_d", "zeta_y", pts))
    _write_summary(cfg, out)


def _write_summary(cfg: PipelineConfig, out: Path) -> None:
    effects = read_json(_require(out, "effects.json", "estimate"))
    sens = read_json(out / "sensitivity.json")
    lines = ["# Rework analysis report", "", "## Effects", "",
             "| estimator | target | coef | std err | 95% CI |", "|---|---|---|---|---|"]
    for key in ("naive", "ate", "att"):
        e = effects[key]
        lines.append(f"| {e['estimator']} | {e['target']} | {e['coef']:.6f} | {e['std_err']:.6f} | "
                     f"[{e['ci_low']:.6f}, {e['ci_high']:.6f}] |")
    if "oracle" in effects:
        lines += ["", f"Simulator oracle: ATE {effects['oracle']['ate']:.6f}, ATT {effects['oracle']['att']:.6f}"]
    lines += ["", "## Policy values (held out)", ""]
    rows = read_rows(out / "values_table.csv")
    if rows:
        cols = list(rows[0])
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for r in rows:
            lines.append("| " + " | ".join(r[c] if not _is_float(r[c]) else f"{float(r[c]):.6f}" for c in cols) + " |")
    lines += ["", "## Robustness values", "", "| target | estimate | RV | RVa |", "|---|---|---|---|"]
    for r in read_rows(out / "robustness_values.csv"):
        lines.append(f"| {r['policy']} | {float(r['theta_hat']):.6f} | {float(r['rv']):.4f} | {float(r['rva']):.4f} |")
    lines += ["", "## Files", ""]
    lines += [f"- {p.relative_to(out).as_posix()}" for p in sorted(out.rglob("*"))
              if p.is_file() and p.name not in (".lock", "report.md")]
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    del sens


def _is_float(s: str) -> bool:
    try:
        float(s)
        return "." in s or "e" in s
    except ValueError:
        return False


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "estimate": stage_estimate,
    "cate": stage_cate,
    "policy": stage_policy,
    "evaluate": stage_evaluate,
    "sensitivity": stage_sensitivity,
    "diagnose": stage_diagnose,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, stage: str, lock: bool = True) -> None:
    """Run one stage; failures are re-raised as StageError tagged with its name."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    cfg.validate()
    out = Path(cfg.output_dir)
    ctx = output_lock(out) if lock else contextlib.nullcontext()
    with ctx:
        if stage in ("simulate", "estimate"):
            write_json(out / "config.json", cfg.to_dict())
        try:
            log.info("stage %s", stage)
            STAGE_FUNCS[stage](cfg, out)
        except DependencyError:
            raise
        except ReworkError as e:
            raise StageError(stage, e) from e


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> Path:
    """Run all stages into ``cfg.output_dir``; returns the output directory.

    Outputs of completed stages are kept when a later stage fails.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    with output_lock(out):
        for stage in stages:
            if stage == "simulate" and not cfg.simulate:
                continue
            run_stage(cfg, stage, lock=False)
    return out
