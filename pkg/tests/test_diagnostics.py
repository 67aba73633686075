from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reworkd.diagnostics import PSB_THRESHOLD, histogram_arrays, overlap_histograms, psb, psb_arrays
from reworkd.errors import ParameterError, ShapeError

from conftest import make_dataset


def _psb_loop(x, a, m, control="literal"):
    """Scalar loop version of the balance score for one covariate."""
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / (n - 1)
    num1 = den1 = num0 = den0 = 0.0
    for xi, ai, mi in zip(x, a, m):
        if ai == 1:
            num1 += xi / mi
            den1 += 1 / mi
        else:
            w = 1 / (1 - mi) if control == "complement" else 1 / mi
            num0 += w * xi
            den0 += w
    return abs(num1 / den1 - mean) / var, abs(num0 / den0 - mean) / var


@pytest.mark.parametrize("control", ["literal", "complement"])
def test_psb_matches_loop(control):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3)) * [1.0, 3.0, 0.2]
    a = rng.integers(0, 2, 60)
    m = rng.uniform(0.1, 0.9, 60)
    rep = psb_arrays(X, a, m, ["p", "q", "r"], control)
    for j, name in enumerate("pqr"):
        t, c = _psb_loop(X[:, j], a, m, control)
        e = rep.entry(name)
        assert e.psb_treated == pytest.approx(t, rel=1e-12)
        assert e.psb_control == pytest.approx(c, rel=1e-12)


def test_randomized_small_scores():
    rng = np.random.default_rng(1)
    n = 10_000
    X = rng.normal(size=(n, 5))
    a = rng.integers(0, 2, n)
    rep = psb_arrays(X, a, np.full(n, 0.5), [f"x{j}" for j in range(5)])
    assert rep.max_psb < 0.05
    assert rep.all_pass


def test_constant_covariate_not_applicable():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.full(50, 3.0), rng.normal(size=50)])
    rep = psb_arrays(X, rng.integers(0, 2, 50), np.full(50, 0.4), ["c", "x"])
    assert not rep.entry("c").applicable
    assert rep.entry("c").passes() == (None, None)
    assert rep.entry("x").applicable


def test_confounded_simulator_imbalanced(sim_small):
    d, _ = sim_small
    m = np.full(d.n, d.treatment.mean())
    e = psb(d, m, ["cm_mean"]).entry("cm_mean")
    assert max(e.psb_treated, e.psb_control) > PSB_THRESHOLD


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100), scale=st.floats(0.1, 10))
def test_shift_invariance_and_inverse_scaling(seed, shift, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=40)
    a = np.r_[0, 1, rng.integers(0, 2, 38)]
    m = rng.uniform(0.2, 0.8, 40)
    base = psb_arrays(x, a, m, ["x"]).entry("x")
    shifted = psb_arrays(x + shift, a, m, ["x"]).entry("x")
    scaled = psb_arrays(x * scale, a, m, ["x"]).entry("x")
    assert shifted.psb_treated == pytest.approx(base.psb_treated, rel=1e-6, abs=1e-9)
    assert scaled.psb_treated == pytest.approx(base.psb_treated / scale, rel=1e-10, abs=1e-12)
    assert scaled.psb_control == pytest.approx(base.psb_control / scale, rel=1e-10, abs=1e-12)


def test_pass_flags_and_csv(tmp_path):
    rng = np.random.default_rng(3)
    X = np.column_stack([rng.normal(size=100), np.ones(100)])
    rep = psb_arrays(X, rng.integers(0, 2, 100), np.full(100, 0.5), ["x", "k"])
    e = rep.entry("x")
    assert e.passes() == (e.psb_treated < 0.2, e.psb_control < 0.2)
    rep.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "covariate,A=1,A=0,pass_A=1,pass_A=0"
    assert lines[2] == "k,NA,NA,NA,NA"


def test_psb_contracts():
    with pytest.raises(ParameterError):
        psb_arrays(np.ones((3, 1)), [0, 1, 0], [0.5, 1.0, 0.5], ["x"])
    with pytest.raises(ShapeError):
        psb_arrays(np.ones((3, 1)), [0, 1], [0.5, 0.5, 0.5], ["x"])
    with pytest.raises(ParameterError):
        psb_arrays(np.ones((3, 1)), [0, 1, 0], [0.5] * 3, ["x"], control_weighting="other")


def test_psb_dataset_default_covariates():
    d = make_dataset(40)
    rep = psb(d, np.full(40, 0.5))
    assert [e.covariate for e in rep.entries] == d.feature_names


# ---------------------------------------------------------------- histograms


def test_histogram_two_bins():
    h = histogram_arrays([0, 1, 0, 1], [0, 0, 1, 1], bins=2)
    assert h.counts_treated.tolist() == [1, 1]
    assert h.counts_control.tolist() == [1, 1]


def test_histogram_constant_single_bin():
    h = histogram_arrays(np.full(7, 2.5), [0, 1, 0, 1, 1, 0, 0], bins=5)
    assert np.count_nonzero(h.counts_treated + h.counts_control) == 1
    assert h.counts_treated.sum() == 3 and h.counts_control.sum() == 4


def test_histogram_empty_group():
    h = histogram_arrays([0.1, 0.5, 0.9], [0, 0, 0], bins=3)
    assert h.counts_treated.sum() == 0
    assert h.counts_control.sum() == 3


def test_histogram_needs_two_bins():
    with pytest.raises(ParameterError):
        histogram_arrays([0.0, 1.0], [0, 1], bins=1)


def test_simulator_histogram_matches_bucketing(sim_small):
    d, _ = sim_small
    h = overlap_histograms(d, "cm_mean", bins=30)
    x, a = d.column("cm_mean"), d.treatment
    lo, hi = x.min(), x.max()
    assert h.edges[0] == lo and h.edges[-1] == hi
    width = (hi - lo) / 30
    t = np.zeros(30, int)
    c = np.zeros(30, int)
    for xi, ai in zip(x, a):
        k = min(int((xi - lo) // width), 29)
        # floating edges: defer to the explicit comparison when near a boundary
        while k > 0 and xi < h.edges[k]:
            k -= 1
        while k < 29 and xi >= h.edges[k + 1]:
            k += 1
        (t if ai == 1 else c)[k] += 1
    assert h.counts_treated.tolist() == t.tolist()
    assert h.counts_control.tolist() == c.tolist()
    assert t.sum() == a.sum() and c.sum() == (a == 0).sum()


def test_histogram_csv(tmp_path):
    h = histogram_arrays([0.0, 1.0, 2.0], [1, 0, 1], bins=2, covariate="z")
    h.write_csv(tmp_path / "h.csv")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "bin_low,bin_high,treated,control"
    assert rows[1:] == ["0.0,1.0,1,0", "1.0,2.0,1,1"]
