"""Nuisance learners, fold assignment and grid tuning.

All learners are small numpy implementations: least squares (plain and
ridge), logistic regression by IRLS, CART regression trees, bagged random
forests and boosted stumps. Classification trees reuse the regression tree
on the 0/1 target, so leaves hold class frequencies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateClassError,
    ParameterError,
    ShapeError,
    TuningError,
    ValidationError,
)

log = logging.getLogger(__name__)

KINDS = ("ols", "ridge", "logistic", "cart", "random_forest", "boosted_stumps")

DEFAULTS: dict[str, dict[str, Any]] = {
    "ols": {},
    "ridge": {"lambda": 1.0},
    "logistic": {"max_iter": 100, "tol": 1e-8},
    "cart": {"max_depth": 5, "min_leaf": 20},
    "random_forest": {
        "n_trees": 100, "max_depth": 8, "min_leaf": 5,
        "max_features": "sqrt", "bootstrap": True,
    },
    "boosted_stumps": {"n_stages": 100, "learning_rate": 0.1},
}

LOGISTIC_RIDGE = 1e-8
OLS_FALLBACK_RIDGE = 1e-8


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.hyperparameters) - set(DEFAULTS[self.kind])
        if unknown:
            raise ParameterError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        p = self.params
        if "lambda" in p and not p["lambda"] >= 0:
            raise ParameterError("ridge penalty lambda must be >= 0")
        if "max_depth" in p and not p["max_depth"] >= (0 if self.kind == "random_forest" else 1):
            raise ParameterError("max_depth must be >= 1")
        if "min_leaf" in p and not p["min_leaf"] >= 1:
            raise ParameterError("min_leaf must be >= 1")
        if "n_trees" in p and not p["n_trees"] >= 1:
            raise ParameterError("n_trees must be >= 1")
        if "n_stages" in p and not p["n_stages"] >= 1:
            raise ParameterError("n_stages must be >= 1")
        if "learning_rate" in p and not 0.0 < p["learning_rate"] <= 1.0:
            raise ParameterError("learning_rate must lie in (0, 1]")
        if "max_iter" in p and not p["max_iter"] >= 1:
            raise ParameterError("max_iter must be >= 1")

    @property
    def params(self) -> dict[str, Any]:
        return {**DEFAULTS[self.kind], **dict(self.hyperparameters)}

    def with_seed(self, seed: int) -> "LearnerSpec":
        return LearnerSpec(self.kind, dict(self.hyperparameters), int(seed))

    def label(self) -> str:
        hp = ",".join(f"{k}={v}" for k, v in sorted(self.hyperparameters.items()))
        return f"{self.kind}({hp})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters), "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        return cls(d["kind"], dict(d.get("hyperparameters", {})), int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, s: str) -> "LearnerSpec":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    k: int
    fold_of: np.ndarray
    seed: int

    def train_test(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.fold_of != f), np.flatnonzero(self.fold_of == f)

    def sizes(self) -> list[int]:
        return np.bincount(self.fold_of, minlength=self.k).tolist()


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Random balanced fold assignment; fold sizes differ by at most one."""
    if k < 2 or n < k:
        raise ParameterError(f"need n >= k >= 2, got n={n}, k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    fold_of.setflags(write=False)
    return FoldAssignment(k, fold_of, int(seed))


# ---------------------------------------------------------------- models


class FittedModel:
    kind: str = ""

    def __init__(self, n_features: int, n_train: int):
        self.n_features = n_features
        self.n_train = n_train
        self.warnings: list[str] = []
        self.is_classifier = False

    def _raw_predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(-1, self.n_features) if X.size else np.empty((0, self.n_features))
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} columns, got {X.shape[1]}")
        if X.shape[0] == 0:
            return np.empty(0)
        out = self._raw_predict(X)
        if self.is_classifier:
            out = np.clip(out, 0.0, 1.0)
        return out


class LinearModel(FittedModel):
    def __init__(self, kind, intercept, coef, n_train):
        super().__init__(coef.shape[0], n_train)
        self.kind = kind
        self.intercept = float(intercept)
        self.coef = coef

    def _raw_predict(self, X):
        return self.intercept + X @ self.coef


class LogisticModel(FittedModel):
    kind = "logistic"

    def __init__(self, intercept, coef, cov, n_iter, converged, n_train):
        super().__init__(coef.shape[0], n_train)
        self.intercept = float(intercept)
        self.coef = coef
        self.cov = cov
        self.n_iter = n_iter
        self.converged = converged
        self.is_classifier = True

    @property
    def std_errors(self) -> np.ndarray:
        """Standard errors of (intercept, coef...) from the inverse Fisher information."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def _raw_predict(self, X):
        return expit(self.intercept + X @ self.coef)


class TreeModel(FittedModel):
    """Array-encoded binary tree; ``feature < 0`` marks a leaf."""

    kind = "cart"

    def __init__(self, feature, threshold, left, right, value, n_features, n_train):
        super().__init__(n_features, n_train)
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def _raw_predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])


class ForestModel(FittedModel):
    kind = "random_forest"

    def __init__(self, trees: list[TreeModel], n_features, n_train):
        super().__init__(n_features, n_train)
        self.trees = trees

    def _raw_predict(self, X):
        return np.mean([t._raw_predict(X) for t in self.trees], axis=0)


class BoostedStumpsModel(FittedModel):
    kind = "boosted_stumps"

    def __init__(self, base, features, thresholds, left_values, right_values, n_features, n_train):
        super().__init__(n_features, n_train)
        self.base = base
        self.features = features
        self.thresholds = thresholds
        self.left_values = left_values
        self.right_values = right_values

    def staged_predict(self, X):
        X = np.asarray(X, dtype=float)
        pred = np.full(X.shape[0], self.base)
        yield pred.copy()
        for f, t, lv, rv in zip(self.features, self.thresholds, self.left_values, self.right_values):
            pred += np.where(X[:, f] <= t, lv, rv)
            yield pred.copy()

    def _raw_predict(self, X):
        pred = np.full(X.shape[0], self.base)
        for f, t, lv, rv in zip(self.features, self.thresholds, self.left_values, self.right_values):
            pred += np.where(X[:, f] <= t, lv, rv)
        return pred


# ---------------------------------------------------------------- fitting


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if y.shape[0] < 2:
        raise ValidationError("need at least 2 training rows")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValidationError("training data contains NaN")
    return X, y


def _fit_linear(X, y, lam: float, kind: str) -> LinearModel:
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    A = Xc.T @ Xc
    b = Xc.T @ yc
    p = A.shape[0]
    warn = None
    if kind == "ols" and p and np.linalg.matrix_rank(A) < p:
        lam = OLS_FALLBACK_RIDGE
        warn = "singular normal equations; fell back to ridge with lambda=1e-8"
    coef = np.linalg.solve(A + lam * np.eye(p), b) if p else np.zeros(0)
    model = LinearModel(kind, ym - xm @ coef, coef, X.shape[0])
    if warn:
        model.warnings.append(warn)
        log.debug(warn)
    return model


def _fit_logistic(X, a, max_iter: int, tol: float) -> LogisticModel:
    n, p = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.column_stack([np.ones(n), (X - mu) / sd])
    pen = np.full(p + 1, LOGISTIC_RIDGE)

    def objective(beta):
        eta = Z @ beta
        # log-likelihood with a numerically stable log(1 + e^eta)
        return float(a @ eta - np.logaddexp(0.0, eta).sum() - 0.5 * pen @ beta**2)

    beta = np.zeros(p + 1)
    beta[0] = math.log(a.mean() / (1 - a.mean()))
    current = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(Z @ beta)
        w = prob * (1 - prob)
        H = (Z * w[:, None]).T @ Z + np.diag(pen)
        g = Z.T @ (a - prob) - pen * beta
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            val = objective(cand)
            if val >= current or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta))
        # Newton decrement plus a relative step test: ends drift along null
        # directions of a collinear design but not divergence under separation
        decrement = 0.5 * float(g @ step)
        settled = decrement < tol * max(1.0, abs(current)) and change < math.sqrt(tol) * (1.0 + np.max(np.abs(beta)))
        beta, current = cand, val
        if change < tol or settled:
            converged = True
            break
    coef = beta[1:] / sd
    intercept = beta[0] - mu @ coef
    # covariance on the original scale
    Xo = np.column_stack([np.ones(n), X])
    prob = expit(Xo @ np.concatenate([[intercept], coef]))
    info = (Xo * (prob * (1 - prob))[:, None]).T @ Xo + LOGISTIC_RIDGE * np.eye(p + 1)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    model = LogisticModel(intercept, coef, cov, it, converged, n)
    if not converged:
        model.warnings.append(f"IRLS stopped at the iteration cap ({max_iter})")
    return model


class _TreeBuilder:
    """Breadth-first CART growth on presorted index matrices.

    ``order[f]`` lists the node's rows sorted by feature ``f``; splitting a
    node partitions every row of ``order`` with a boolean mask, so sorting
    happens once per tree. Split choice maximizes the weighted sum of
    squares explained; ties go to the lowest feature, then lowest threshold.
    """

    def __init__(self, X, y, w, max_depth, min_leaf, max_features=None, rng=None):
        self.X, self.y, self.w = X, y, w
        self.XT = np.ascontiguousarray(X.T)
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.rng = rng

    def best_split(self, order):
        p, m = order.shape
        feats = np.arange(p)
        if self.max_features is not None and self.max_features < p:
            feats = np.sort(self.rng.choice(p, self.max_features, replace=False))
        sub = order[feats]
        xs = np.take_along_axis(self.XT[feats], sub, axis=1)
        ws = self.w[sub]
        cw = np.cumsum(ws, axis=1)
        cs = np.cumsum(ws * self.y[sub], axis=1)
        tw, ts = cw[:, -1:], cs[:, -1:]
        nl, sl = cw[:, :-1], cs[:, :-1]
        nr, sr = tw - nl, ts - sl
        ok = (xs[:, :-1] < xs[:, 1:]) & (nl >= self.min_leaf) & (nr >= self.min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(ok, sl**2 / nl + sr**2 / nr, -np.inf)
        if gain.size == 0:
            return None
        flat = int(np.argmax(gain))
        fi, pos = divmod(flat, m - 1)
        best = gain[fi, pos]
        parent = float(ts[0, 0] ** 2 / tw[0, 0])
        if not np.isfinite(best) or best - parent <= 1e-12 * max(1.0, abs(parent)):
            return None
        return int(feats[fi]), 0.5 * (xs[fi, pos] + xs[fi, pos + 1])

    def build(self) -> TreeModel:
        n, p = self.X.shape
        rows = np.flatnonzero(self.w > 0)
        order = np.argsort(self.XT[:, rows], axis=1, kind="stable")
        order = rows[order]
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(idx):
            wsum = self.w[idx].sum()
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            value.append(float(self.w[idx] @ self.y[idx] / wsum))
            return len(feature) - 1

        frontier = [(new_node(order[0]), order, 0)]
        while frontier:
            nxt = []
            for node, ordr, depth in frontier:
                if depth >= self.max_depth or ordr.shape[1] < 2:
                    continue
                split = self.best_split(ordr)
                if split is None:
                    continue
                f, t = split
                goes_left = self.X[:, f] <= t
                mask = goes_left[ordr]
                n_left = int(mask[0].sum())
                lo = ordr[mask].reshape(ordr.shape[0], n_left)
                hi = ordr[~mask].reshape(ordr.shape[0], ordr.shape[1] - n_left)
                li, ri = new_node(lo[0]), new_node(hi[0])
                feature[node], threshold[node], left[node], right[node] = f, t, li, ri
                nxt.append((li, lo, depth + 1))
                nxt.append((ri, hi, depth + 1))
            frontier = nxt
        return TreeModel(
            np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(value), p, n,
        )


def _fit_cart(X, y, params, w=None, max_features=None, rng=None) -> TreeModel:
    w = np.ones(X.shape[0]) if w is None else w
    return _TreeBuilder(X, y, w, params["max_depth"], params["min_leaf"], max_features, rng).build()


def _fit_forest(X, y, params, seed) -> ForestModel:
    n, p = X.shape
    mf = params["max_features"]
    if mf == "sqrt":
        mf = max(1, int(math.isqrt(p)))
    elif mf in (None, "all"):
        mf = p
    else:
        mf = max(1, min(p, int(mf)))
    trees = []
    for t in range(params["n_trees"]):
        rng = np.random.default_rng([int(seed), t])
        if params["bootstrap"]:
            w = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        else:
            w = np.ones(n)
        trees.append(_fit_cart(X, y, params, w, mf, rng))
    return ForestModel(trees, p, n)


def _fit_stumps(X, y, params) -> BoostedStumpsModel:
    n, p = X.shape
    lr = params["learning_rate"]
    XT = np.ascontiguousarray(X.T)
    order = np.argsort(XT, axis=1, kind="stable")
    xs = np.take_along_axis(XT, order, axis=1)
    distinct = xs[:, :-1] < xs[:, 1:]
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    base = float(y.mean())
    resid = y - base
    feats, thr, lvals, rvals = [], [], [], []
    for _ in range(params["n_stages"]):
        cs = np.cumsum(resid[order], axis=1)
        sl = cs[:, :-1]
        sr = cs[:, -1:] - sl
        gain = np.where(distinct, sl**2 / nl + sr**2 / nr, -np.inf)
        flat = int(np.argmax(gain))
        if not np.isfinite(gain.flat[flat]):
            break
        f, pos = divmod(flat, n - 1)
        lv = lr * sl[f, pos] / nl[pos]
        rv = lr * sr[f, pos] / nr[pos]
        t = 0.5 * (xs[f, pos] + xs[f, pos + 1])
        resid = resid - np.where(X[:, f] <= t, lv, rv)
        feats.append(f)
        thr.append(t)
        lvals.append(lv)
        rvals.append(rv)
    return BoostedStumpsModel(base, feats, thr, lvals, rvals, p, n)


def fit_regressor(spec: LearnerSpec, X, y) -> FittedModel:
    """Fit ``spec`` to a continuous target by its training objective."""
    X, y = _check_xy(X, y)
    p = spec.params
    if spec.kind == "ols":
        return _fit_linear(X, y, 0.0, "ols")
    if spec.kind == "ridge":
        return _fit_linear(X, y, float(p["lambda"]), "ridge")
    if spec.kind == "cart":
        return _fit_cart(X, y, p)
    if spec.kind == "random_forest":
        return _fit_forest(X, y, p, spec.seed)
    if spec.kind == "boosted_stumps":
        return _fit_stumps(X, y, p)
    raise ParameterError(f"{spec.kind} is not a regression learner")


def fit_classifier(spec: LearnerSpec, X, a) -> FittedModel:
    """Fit a probability model for a binary target."""
    X, a = _check_xy(X, a)
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValidationError("classifier target must be binary 0/1")
    if a.min() == a.max():
        raise DegenerateClassError("classifier target contains a single class")
    p = spec.params
    if spec.kind == "logistic":
        model = _fit_logistic(X, a, int(p["max_iter"]), float(p["tol"]))
    elif spec.kind in ("ols", "ridge"):
        model = fit_regressor(spec, X, a)
    elif spec.kind == "cart":
        model = _fit_cart(X, a, p)
    elif spec.kind == "random_forest":
        model = _fit_forest(X, a, p, spec.seed)
    else:
        model = _fit_stumps(X, a, p)
    model.is_classifier = True
    return model


def predict(model: FittedModel, X) -> np.ndarray:
    return model.predict(X)


# ---------------------------------------------------------------- tuning


def _loss(kind: str, target: np.ndarray, pred: np.ndarray) -> float:
    if kind == "rmse":
        return float(np.sqrt(np.mean((target - pred) ** 2)))
    if kind == "log_loss":
        p = np.clip(pred, 1e-15, 1 - 1e-15)
        return float(-np.mean(target * np.log(p) + (1 - target) * np.log(1 - p)))
    raise ParameterError(f"unknown loss {kind!r}")


@dataclass(frozen=True)
class TuningRow:
    spec: LearnerSpec
    loss: float
    error: str | None = None


def cross_val_predict(spec: LearnerSpec, X, y, folds: FoldAssignment, classify: bool) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty(y.shape[0])
    fit = fit_classifier if classify else fit_regressor
    for f in range(folds.k):
        tr, te = folds.train_test(f)
        out[te] = fit(spec, X[tr], y[tr]).predict(X[te])
    return out


def grid_tune(specs: Sequence[LearnerSpec], X, y, folds: FoldAssignment, loss: str = "rmse"):
    """Pick the spec with the lowest pooled out-of-fold loss.

    Returns
    -------
    best : LearnerSpec
    report : list of TuningRow sorted by loss (failed specs last)
    """
    if not specs:
        raise ParameterError("grid_tune needs at least one spec")
    classify = loss == "log_loss"
    y = np.asarray(y, dtype=float)
    rows: list[TuningRow] = []
    for spec in specs:
        try:
            pred = cross_val_predict(spec, X, y, folds, classify)
            rows.append(TuningRow(spec, _loss(loss, y, pred)))
        except Exception as exc:  # a failing candidate is skipped, not fatal
            rows.append(TuningRow(spec, math.inf, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in rows if r.error is None]
    if not ok:
        raise TuningError("every candidate learner failed: " + "; ".join(r.error or "" for r in rows))
    best = min(ok, key=lambda r: r.loss)  # min keeps the first of equal losses
    report = sorted(rows, key=lambda r: (r.error is not None, r.loss))
    return best.spec, report


def rmse_report(nuisances, d) -> dict[str, float]:
    """RMSE of the cross-fitted nuisances against observed A and Y."""
    a = np.asarray(d.treatment, dtype=float)
    y = np.asarray(d.yield_frac, dtype=float)
    m = np.asarray(nuisances.m_hat_raw)
    treated = a == 1
    return {
        "rmse_m": float(np.sqrt(np.mean((m - a) ** 2))),
        "rmse_g0": float(np.sqrt(np.mean((np.asarray(nuisances.g0_hat)[~treated] - y[~treated]) ** 2))),
        "rmse_g1": float(np.sqrt(np.mean((np.asarray(nuisances.g1_hat)[treated] - y[treated]) ** 2))),
    }
