"""Rework policies: CATE thresholds, conservative bounds and policy trees.

Policy values are measured against never reworking:
V(π; c) = E[π(Z)·(ψ_b − c)], estimated on held-out AIPW scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cate import CateFit, ConfidenceBand, cate_lower_bound, cate_predict
from .data_model import Dataset
from .dml_irm import EffectEstimate, ScoreSet, estimate_effect
from .errors import (
    FeatureError,
    OracleUnavailableError,
    ParameterError,
    ShapeError,
    UnsupportedDepthError,
)

FORMS = ("cate_threshold_1d", "cate_threshold_2d", "conservative_threshold", "tree", "observed", "constant")
DEFAULT_TREE_FEATURES = ("cm_mean", "cs_mean", "invalid_count", "cm_var")
DEFAULT_COSTS = (0.0, 0.01, 0.03)
MAX_CANDIDATES = 256


# ---------------------------------------------------------------- trees


@dataclass(frozen=True)
class TreeNode:
    """Internal node when ``feature >= 0``, else a leaf carrying ``action``."""

    feature: int = -1
    threshold: float = float("nan")
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    action: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def to_dict(self, names: Sequence[str]) -> dict:
        if self.is_leaf:
            return {"action": int(self.action)}
        return {
            "feature": names[self.feature],
            "feature_index": int(self.feature),
            "threshold": float(self.threshold),
            "left": self.left.to_dict(names),
            "right": self.right.to_dict(names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeNode":
        if "action" in d:
            return cls(action=int(d["action"]))
        return cls(int(d["feature_index"]), float(d["threshold"]),
                   cls.from_dict(d["left"]), cls.from_dict(d["right"]))


@dataclass(frozen=True)
class PolicyTree:
    depth: int
    root: TreeNode
    search_mode: str
    feature_names: tuple[str, ...]
    gamma: float = 0.0
    metadata: dict = field(default_factory=dict, compare=False)

    def predict(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, len(self.feature_names))
        if Z.shape[1] != len(self.feature_names):
            raise ShapeError(f"tree needs {len(self.feature_names)} features, got {Z.shape[1]}")
        out = np.empty(Z.shape[0], dtype=np.int64)
        self._fill(self.root, Z, np.arange(Z.shape[0]), out)
        return out

    def _fill(self, node: TreeNode, Z, idx, out) -> None:
        if node.is_leaf:
            out[idx] = node.action
            return
        go_left = Z[idx, node.feature] <= node.threshold
        self._fill(node.left, Z, idx[go_left], out)
        self._fill(node.right, Z, idx[~go_left], out)

    def thresholds(self) -> list[tuple[int, float]]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                out.append((node.feature, node.threshold))
                stack += [node.right, node.left]
        return out

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "search_mode": self.search_mode,
            "gamma": self.gamma,
            "feature_names": list(self.feature_names),
            "metadata": self.metadata,
            "root": self.root.to_dict(self.feature_names),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyTree":
        return cls(int(d["depth"]), TreeNode.from_dict(d["root"]), d["search_mode"],
                   tuple(d["feature_names"]), float(d.get("gamma", 0.0)), dict(d.get("metadata", {})))


def weighted_classification_targets(psi_b, gamma: float = 0.0):
    """Weights |ψ_b − γ| and labels sign(ψ_b − γ), with sign(0) = −1."""
    s = np.asarray(psi_b, dtype=float) - gamma
    return np.abs(s), np.where(s > 0, 1, -1).astype(np.int64)


def candidate_thresholds(x, max_candidates: int = MAX_CANDIDATES) -> np.ndarray:
    """Midpoints of adjacent sorted unique values, thinned to quantile-spaced
    positions when there are more than ``max_candidates``."""
    u = np.unique(np.asarray(x, dtype=float))
    mids = (u[:-1] + u[1:]) / 2.0
    if mids.size > max_candidates:
        keep = np.unique(np.round(np.linspace(0, mids.size - 1, max_candidates)).astype(np.int64))
        mids = mids[keep]
    return mids


def policy_objective(decisions, psi_b, gamma: float = 0.0) -> float:
    """(1/n) Σ (2π − 1)(ψ_b − γ)."""
    pi = np.asarray(decisions, dtype=float)
    s = np.asarray(psi_b, dtype=float) - gamma
    return float(np.mean((2 * pi - 1) * s))


def _leaf(total: float) -> TreeNode:
    return TreeNode(action=1 if total > 0 else 0)


def _best_split_1d(s, bins, n_cand, rows):
    """Best (value, u) of |left| + |right| for one feature among thresholds
    that leave both sides nonempty; None if no such threshold."""
    sums = np.bincount(bins[rows], weights=s[rows], minlength=n_cand + 1)
    cnts = np.bincount(bins[rows], minlength=n_cand + 1)
    left = np.cumsum(sums)[:-1]
    nleft = np.cumsum(cnts)[:-1]
    total = sums.sum()
    ok = (nleft > 0) & (nleft < rows.size)
    if not ok.any():
        return None
    vals = np.abs(left) + np.abs(total - left)
    vals[~ok] = -np.inf
    u = int(np.argmax(vals))
    return float(vals[u]), u


def _greedy(s, Zbins, cands, rows, depth) -> TreeNode:
    total = float(s[rows].sum())
    if depth == 0:
        return _leaf(total)
    best = None
    for j in range(len(cands)):
        if cands[j].size == 0:
            continue
        r = _best_split_1d(s, Zbins[:, j], cands[j].size, rows)
        if r is not None and (best is None or r[0] > best[0]):
            best = (r[0], j, r[1])
    if best is None:
        return _leaf(total)
    _, j, u = best
    go_left = Zbins[rows, j] <= u
    return TreeNode(j, float(cands[j][u]),
                    _greedy(s, Zbins, cands, rows[go_left], depth - 1),
                    _greedy(s, Zbins, cands, rows[~go_left], depth - 1))


def _exact_depth2(s, Zbins, cands) -> TreeNode:
    """Exhaustive root/child search via cumulative two-way histograms.

    For root feature j and child feature k, P[t, u] is the score sum over
    rows with bin_j <= t and bin_k <= u; each child's best split follows
    from P, the row totals and the column totals in O(c_j·c_k).
    """
    p = len(cands)
    total = float(s.sum())
    best = None  # (objective, j, t, (k_left, u_left), (k_right, u_right))
    for j in range(p):
        cj = cands[j].size
        if cj == 0:
            continue
        bestL = np.full(cj, -np.inf)
        argL = np.zeros((cj, 2), dtype=np.int64)
        bestR = np.full(cj, -np.inf)
        argR = np.zeros((cj, 2), dtype=np.int64)
        for k in range(p):
            ck = cands[k].size
            if ck == 0:
                continue
            flat = Zbins[:, j] * (ck + 1) + Zbins[:, k]
            H = np.bincount(flat, weights=s, minlength=(cj + 1) * (ck + 1)).reshape(cj + 1, ck + 1)
            P = H.cumsum(axis=0).cumsum(axis=1)
            PL = P[:cj, :ck]
            Ltot = P[:cj, ck]
            vL = np.abs(PL) + np.abs(Ltot[:, None] - PL)
            PR = P[cj, :ck][None, :] - PL
            Rtot = total - Ltot
            vR = np.abs(PR) + np.abs(Rtot[:, None] - PR)
            uL = np.argmax(vL, axis=1)
            uR = np.argmax(vR, axis=1)
            mL = vL[np.arange(cj), uL]
            mR = vR[np.arange(cj), uR]
            better = mL > bestL
            bestL[better], argL[better] = mL[better], np.column_stack([np.full(better.sum(), k), uL[better]])
            better = mR > bestR
            bestR[better], argR[better] = mR[better], np.column_stack([np.full(better.sum(), k), uR[better]])
        obj = bestL + bestR
        t = int(np.argmax(obj))
        if best is None or obj[t] > best[0]:
            best = (float(obj[t]), j, t, tuple(argL[t]), tuple(argR[t]))
    if best is None:
        return _leaf(total)
    _, j, t, (kl, ul), (kr, ur) = best
    go_left = Zbins[:, j] <= t

    def child(rows, k, u):
        inner = Zbins[rows, k] <= u
        return TreeNode(int(k), float(cands[k][u]), _leaf(float(s[rows][inner].sum())),
                        _leaf(float(s[rows][~inner].sum())))

    rows = np.arange(s.size)
    return TreeNode(j, float(cands[j][t]), child(rows[go_left], kl, ul), child(rows[~go_left], kr, ur))


def fit_policy_tree(
    Z,
    psi_b,
    gamma: float = 0.0,
    depth: int = 2,
    mode: str = "greedy",
    feature_names: Sequence[str] | None = None,
    max_candidates: int = MAX_CANDIDATES,
) -> PolicyTree:
    """Tree maximizing (1/n) Σ (2π(Z_i) − 1)(ψ_b,i − γ).

    ``greedy`` picks the best split node by node; ``exact`` searches all
    root and child split combinations jointly (depth at most 2). Ties go
    to the lowest (feature index, threshold).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    s = np.asarray(psi_b, dtype=float).reshape(-1) - gamma
    if Z.shape[0] != s.shape[0]:
        raise ShapeError(f"Z has {Z.shape[0]} rows, scores have {s.shape[0]}")
    if depth < 1:
        raise ParameterError("tree depth must be at least 1")
    if mode not in ("greedy", "exact"):
        raise ParameterError(f"unknown search mode {mode!r}")
    if mode == "exact" and depth > 2:
        raise UnsupportedDepthError(f"exact search is limited to depth 2, got {depth}")
    names = tuple(feature_names) if feature_names is not None else tuple(f"z{j}" for j in range(Z.shape[1]))
    if len(names) != Z.shape[1]:
        raise ShapeError("feature_names length does not match Z")
    cands = [candidate_thresholds(Z[:, j], max_candidates) for j in range(Z.shape[1])]
    Zbins = np.column_stack([np.searchsorted(c, Z[:, j], side="left") for j, c in enumerate(cands)])
    rows = np.arange(s.size)
    if mode == "exact" and depth == 2:
        root = _exact_depth2(s, Zbins, cands)
    else:
        root = _greedy(s, Zbins, cands, rows, depth)
    n_unique = [int(np.unique(Z[:, j]).size) for j in range(Z.shape[1])]
    meta = {
        "candidates_per_feature": [int(c.size) for c in cands],
        "downsampled": any(c.size < u - 1 for c, u in zip(cands, n_unique)),
        "max_candidates": int(max_candidates),
        "n_train": int(s.size),
    }
    tree = PolicyTree(depth, root, mode, names, float(gamma), meta)
    meta["objective"] = policy_objective(tree.predict(Z), s)
    return tree


# ---------------------------------------------------------------- policies


@dataclass(frozen=True, eq=False)
class Policy:
    form: str
    payload: object
    z_columns: tuple[str, ...]
    gamma: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.form not in FORMS:
            raise ParameterError(f"unknown policy form {self.form!r}")

    def to_dict(self) -> dict:
        d = {"form": self.form, "name": self.name, "gamma": self.gamma, "z_columns": list(self.z_columns)}
        if self.form == "tree":
            d["tree"] = self.payload.to_dict()
        elif self.form in ("cate_threshold_1d", "cate_threshold_2d"):
            d["cate_fit"] = self.payload.to_dict()
        elif self.form == "conservative_threshold":
            b = self.payload
            d["band"] = {"grid": [float(v) for v in b.grid], "estimate": [float(v) for v in b.estimate],
                         "lower": [float(v) for v in b.lower], "upper": [float(v) for v in b.upper],
                         "alpha": b.alpha, "n_bootstrap": b.n_bootstrap}
        elif self.form == "constant":
            d["action"] = int(self.payload)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Policy":
        form = d["form"]
        if form == "tree":
            payload = PolicyTree.from_dict(d["tree"])
        elif form in ("cate_threshold_1d", "cate_threshold_2d"):
            payload = CateFit.from_dict(d["cate_fit"])
        elif form == "conservative_threshold":
            b = d["band"]
            payload = ConfidenceBand(np.asarray(b["grid"]), np.asarray(b["estimate"]), np.asarray(b["lower"]),
                                     np.asarray(b["upper"]), float(b["alpha"]), int(b["n_bootstrap"]))
        elif form == "constant":
            payload = int(d["action"])
        else:
            payload = None
        return cls(form, payload, tuple(d["z_columns"]), float(d.get("gamma", 0.0)), d.get("name", ""))


def threshold_policy(fit: CateFit, gamma: float, name: str = "") -> Policy:
    """π(z) = 1{θ̂(z) ≥ γ}."""
    if gamma < 0:
        raise ParameterError("gamma must be nonnegative")
    dims = fit.basis.dims
    form = "cate_threshold_1d" if dims == 1 else "cate_threshold_2d"
    cols = tuple(fit.z_columns) or (("z",) if dims == 1 else tuple(f"z{j + 1}" for j in range(dims)))
    return Policy(form, fit, cols, float(gamma), name)


def conservative_policy(band: ConfidenceBand, gamma: float, z_column: str = "", name: str = "") -> Policy:
    """π(z) = 1{lower(z) ≥ γ} using the band's interpolated lower curve."""
    if np.asarray(band.grid).ndim != 1:
        raise ParameterError("conservative policies need a one-dimensional band")
    return Policy("conservative_threshold", band, (z_column,) if z_column else ("z",), float(gamma), name)


def tree_policy(tree: PolicyTree, name: str = "") -> Policy:
    return Policy("tree", tree, tuple(tree.feature_names), tree.gamma, name)


def observed_policy(name: str = "observed") -> Policy:
    return Policy("observed", None, ("treatment",), 0.0, name)


def constant_policy(action: int, name: str = "") -> Policy:
    return Policy("constant", int(bool(action)), (), 0.0, name or ("always" if action else "never"))


def _column(z, name: str):
    if isinstance(z, Dataset):
        if name == "treatment":
            return np.asarray(z.treatment, dtype=float)
        try:
            return z.column(name)
        except (KeyError, FeatureError) as e:
            raise FeatureError(f"policy needs feature {name!r}") from e
    if isinstance(z, Mapping):
        if name not in z:
            raise FeatureError(f"policy needs feature {name!r}")
        return np.asarray(z[name], dtype=float).reshape(-1)
    raise TypeError


def _z_matrix(p: Policy, z) -> np.ndarray:
    if isinstance(z, (Dataset, Mapping)):
        return np.column_stack([_column(z, c) for c in p.z_columns])
    Z = np.asarray(z, dtype=float)
    width = len(p.z_columns)
    if Z.ndim <= 1:
        Z = Z.reshape(-1, 1) if width == 1 else Z.reshape(-1, width)
    if Z.shape[1] != width:
        raise FeatureError(f"policy consumes {width} features {p.z_columns}, got {Z.shape[1]} columns")
    return Z


def decide(p: Policy, z) -> np.ndarray:
    """Actions in {0, 1} for every row of ``z``.

    ``z`` is a Dataset, a mapping of column name to values, or a matrix
    whose columns follow ``p.z_columns``.
    """
    scalar_row = isinstance(z, Mapping) and all(np.ndim(v) == 0 for v in z.values())
    if p.form == "constant":
        n = len(z) if isinstance(z, Dataset) else (
            len(next(iter(z.values()))) if isinstance(z, Mapping) and not scalar_row else
            (1 if scalar_row else np.asarray(z).shape[0]))
        out = np.full(n, p.payload, dtype=np.int64)
    else:
        Z = _z_matrix(p, z)
        if p.form == "observed":
            out = Z[:, 0].astype(np.int64)
        elif p.form == "tree":
            out = p.payload.predict(Z)
        elif p.form in ("cate_threshold_1d", "cate_threshold_2d"):
            theta, _ = cate_predict(p.payload, Z if p.form == "cate_threshold_2d" else Z[:, 0])
            out = (theta >= p.gamma).astype(np.int64)
        else:
            lower = np.asarray(cate_lower_bound(p.payload, Z[:, 0]))
            out = (lower >= p.gamma).astype(np.int64).reshape(-1)
    return int(out[0]) if scalar_row else out


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class PolicyEvalReport:
    name: str
    values: tuple[EffectEstimate, ...]
    gate: EffectEstimate | None
    share_treated: float
    cost_levels: tuple[float, ...]
    n: int

    def value_at(self, cost: float) -> EffectEstimate:
        return self.values[self.cost_levels.index(cost)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cost_levels": list(self.cost_levels),
            "values": [v.to_dict() for v in self.values],
            "gate": self.gate.to_dict() if self.gate is not None else None,
            "share_treated": self.share_treated,
            "n": self.n,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cost", "ci_low", "effect", "ci_high", "std_err"])
            for c, v in zip(self.cost_levels, self.values):
                w.writerow([repr(float(x)) for x in (c, v.ci[0], v.theta_hat, v.ci[1], v.std_err)])


def evaluate_policy(
    p: Policy, holdout_scores: ScoreSet, holdout_Z, cost_levels: Sequence[float] = DEFAULT_COSTS,
    alpha: float = 0.05,
) -> PolicyEvalReport:
    """Value mean(π·(ψ_b − c)) per cost level, GATE and treated share."""
    if holdout_scores.target != "ATE":
        raise ParameterError("policy evaluation needs ATE scores")
    pi = np.asarray(decide(p, holdout_Z), dtype=float).reshape(-1)
    psi_b = holdout_scores.psi_b
    if pi.shape[0] != psi_b.shape[0]:
        raise ShapeError(f"{pi.shape[0]} decisions for {psi_b.shape[0]} scores")
    ones = -np.ones_like(psi_b)
    values = []
    for c in cost_levels:
        est = estimate_effect(ScoreSet(ones, pi * (psi_b - c), "value"), alpha)
        values.append(EffectEstimate(est.theta_hat, est.std_err, est.ci, est.n, alpha, "value", p.name or p.form))
    treated = pi == 1
    gate = None
    if treated.sum() >= 2:
        g = estimate_effect(ScoreSet(-np.ones(int(treated.sum())), psi_b[treated], "GATE"), alpha)
        gate = EffectEstimate(g.theta_hat, g.std_err, g.ci, g.n, alpha, "GATE", p.name or p.form)
    return PolicyEvalReport(p.name or p.form, tuple(values), gate, float(pi.mean()),
                            tuple(float(c) for c in cost_levels), int(pi.size))


def write_values_table(reports: Sequence[PolicyEvalReport], path) -> None:
    """Wide table: per cost level the 2.5 %, effect and 97.5 % columns."""
    costs = reports[0].cost_levels if reports else DEFAULT_COSTS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["policy"]
        for c in costs:
            header += [f"c{c:g}_ci_low", f"c{c:g}_effect", f"c{c:g}_ci_high"]
        w.writerow(header + ["share_treated", "gate", "gate_std_err"])
        for r in reports:
            row = [r.name]
            for v in r.values:
                row += [repr(float(v.ci[0])), repr(float(v.theta_hat)), repr(float(v.ci[1]))]
            row += [repr(float(r.share_treated)), repr(float(r.gate.theta_hat)) if r.gate else "",
                    repr(float(r.gate.std_err)) if r.gate else ""]
            w.writerow(row)


def regret_vs_oracle(p: Policy, sim_oracle, d: Dataset, class_columns: Sequence[str] | None = None,
                     depth: int | None = None) -> float:
    """Oracle regret against the best depth-≤2 tree on the same features.

    The best in-class value is found by exact search on the true effects;
    for policies outside the tree class the regret is floored at zero.
    """
    from .simulator import OracleTable

    if not isinstance(sim_oracle, OracleTable):
        raise OracleUnavailableError("regret needs the simulator's counterfactual oracle")
    effect = sim_oracle.select(d.lot_id).effect
    own = float(np.mean(decide(p, d) * effect))
    cols = tuple(class_columns) if class_columns else (
        p.z_columns if p.form not in ("observed", "constant", "conservative_threshold") else DEFAULT_TREE_FEATURES)
    if p.form == "conservative_threshold" and not class_columns:
        cols = p.z_columns
    if depth is None:
        depth = min(p.payload.depth, 2) if p.form == "tree" else 2
    Z = np.column_stack([d.column(c) for c in cols])
    best_tree = fit_policy_tree(Z, effect, 0.0, depth, "exact", cols)
    best = float(np.mean(best_tree.predict(Z) * effect))
    return max(best, own) - own
