import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contdid.errors import (
    AllMoversTrimmed,
    CollinearTreatment,
    NoEligibleMovers,
    NoMovers,
    NoQuasiStayers,
    NoStayers,
)
from contdid.estimators import (
    ampos_nostayers,
    ampos_reg,
    dynamic_effects,
    frozen_tuning,
    long_run_reg,
    resolve_trim,
    twfe_reference,
    wampos_ps,
    wampos_ps_nostayers,
    wampos_reg,
)
from contdid.simulate import DgpSpec, generate

from .conftest import make_panel


def sim(**kw):
    base = dict(n=800, T=2, d1_low=0, d1_high=2, p_stay=0.4, dd_low=0.5, dd_high=1.5, slope_sd=0.5, seed=3)
    base.update(kw)
    return generate(DgpSpec(**base))[0]


def all_estimates(panel):
    out = {"delta1": ampos_reg(panel).value}
    out.update({f"reg/{k}": v for k, v in wampos_reg(panel).values_dict().items()})
    out.update({f"ps/{k}": v for k, v in wampos_ps(panel).values_dict().items()})
    return out


# hand examples ------------------------------------------------------------------

def hand_panel():
    # two movers from D1 = 0; three stayers with zero outcome change
    d = [[0, 1], [0, 2], [-1, -1], [0, 0], [1, 1]]
    y = [[0, 2], [0, 2], [0, 0], [5, 5], [1, 1]]
    return make_panel(d, y)


def test_ampos_two_mover_example():
    est = ampos_reg(hand_panel(), bandwidth=2.0, min_ess=1, trim=0.0)
    assert est.value == pytest.approx(1.5, abs=1e-12)
    assert est.n_movers_used == 2 and est.n_movers_dropped == 0 and est.n_controls == 3


def test_ampos_zero_numerators():
    d = [[0, 1], [1, 3], [0, 0], [1, 1], [2, 2]]
    y = [[0, 0.5], [0, 0.5], [0, 0.5], [0, 0.5], [0, 0.5]]
    assert ampos_reg(make_panel(d, y), bandwidth=2.0, min_ess=1).value == pytest.approx(0.0, abs=1e-12)


def test_wampos_single_mover():
    d = [[0, 2], [-1, -1], [0, 0], [1, 1]]
    y = [[0, 3], [0, 0], [0, 0], [0, 0]]
    res = wampos_reg(make_panel(d, y), bandwidth=2.0, min_ess=1)
    assert res["delta2i"].value == pytest.approx(1.5, abs=1e-12)
    assert res["delta2"].value == res["delta2i"].value
    assert [e["code"] for e in res.errors] == ["NoDecreasers"]
    assert "delta2d" not in res


def test_wampos_ps_constant_pscore_is_unconditional_did(linear_panel):
    res = wampos_ps(linear_panel, degree=0)
    d, y = linear_panel.d, linear_panel.y
    dd, dy = d[:, 1] - d[:, 0], y[:, 1] - y[:, 0]
    for target, mask in (("delta2i", dd > 0), ("delta2d", dd < 0)):
        expected = (dy[mask].mean() - dy[dd == 0].mean()) / dd[mask].mean()
        assert res[target].value == pytest.approx(expected, abs=1e-12)


def test_wampos_ps_zero_stayer_changes():
    rng = np.random.default_rng(1)
    n = 40
    d1 = rng.uniform(0, 1, n)
    dd = np.where(np.arange(n) < 20, 1.0, 0.0)
    y1 = rng.normal(size=n)
    dy = np.where(dd > 0, rng.normal(size=n), 0.0)
    res = wampos_ps(make_panel(np.column_stack([d1, d1 + dd]), np.column_stack([y1, y1 + dy])), degree=0)
    assert res["delta2i"].diagnostics["per_t"][0]["numerator"] == pytest.approx(dy[:20].mean(), abs=1e-14)


def test_aggregation_identity(linear_panel):
    for res in (wampos_reg(linear_panel), wampos_ps(linear_panel)):
        share = res["delta2"].diagnostics["share_increase"]
        combo = share * res["delta2i"].value + (1 - share) * res["delta2d"].value
        assert abs(res["delta2"].value - combo) < 1e-12


def test_mover_counts_add_up(linear_panel):
    n_movers = int((linear_panel.d[:, 1] != linear_panel.d[:, 0]).sum())
    est = ampos_reg(linear_panel, bandwidth=0.004)
    assert est.n_movers_used + est.n_movers_dropped == n_movers
    assert est.n_movers_dropped > 0
    res = wampos_reg(linear_panel)
    assert res["delta2"].n_movers_used + res["delta2"].n_movers_dropped == n_movers


def test_trim_rule():
    dd = np.array([1.0, 2.0, 3.0])
    assert resolve_trim(dd, "auto") == 0.01 * np.std(dd, ddof=1)
    assert resolve_trim(dd, 0.3) == 0.3
    with pytest.raises(ValueError):
        resolve_trim(dd, -1)
    d = [[0, 1e-9], [0, 1e-9], [0, 0], [1, 1], [2, 2]]
    with pytest.raises(AllMoversTrimmed):
        ampos_reg(make_panel(d, np.zeros((5, 2))), bandwidth=2.0, min_ess=1, trim=0.01)


def test_errors_without_movers_or_stayers():
    d = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(NoMovers):
        ampos_reg(make_panel(d, np.zeros((3, 2))), bandwidth=1.0)
    with pytest.raises(NoStayers):
        ampos_reg(make_panel(d + np.array([0.0, 1.0]), np.zeros((3, 2))), bandwidth=1.0)


# invariances -------------------------------------------------------------------

def test_fixed_effect_invariance(linear_panel, rng):
    base = all_estimates(linear_panel)
    alpha = rng.normal(scale=10, size=(linear_panel.n_units, 1))
    gamma = rng.normal(scale=10, size=(1, 2))
    shifted = make_panel(linear_panel.d, linear_panel.y + alpha + gamma)
    for key, value in all_estimates(shifted).items():
        assert abs(value - base[key]) < 1e-10, key


@given(st.floats(0.01, 100))
@settings(max_examples=15, deadline=None)
def test_outcome_scale_equivariance(c):
    panel = sim(n=300)
    base = all_estimates(panel)
    scaled = all_estimates(make_panel(panel.d, c * panel.y))
    for key, value in scaled.items():
        assert value == pytest.approx(c * base[key], rel=1e-9, abs=1e-12), key


@given(st.floats(0.1, 10), st.floats(-50, 50))
@settings(max_examples=15, deadline=None)
def test_treatment_affine_equivariance(a, b):
    panel = sim(n=300)
    base = all_estimates(panel)
    moved = all_estimates(make_panel(a * panel.d + b, panel.y))
    for key, value in moved.items():
        assert value == pytest.approx(base[key] / a, rel=1e-7), key


def test_relabel_invariance(linear_panel):
    perm = np.random.default_rng(9).permutation(linear_panel.n_units)
    base = all_estimates(linear_panel)
    other = all_estimates(linear_panel.take(perm))
    for key, value in other.items():
        assert abs(value - base[key]) < 1e-12, key


def test_determinism(linear_panel):
    a = wampos_reg(linear_panel)
    b = wampos_reg(linear_panel)
    assert {k: v.to_dict() for k, v in a.items()} == {k: v.to_dict() for k, v in b.items()}
    assert ampos_reg(linear_panel).to_dict() == ampos_reg(linear_panel).to_dict()


# discrete baseline treatment -------------------------------------------------------

def cell_mean_wampos(d, y):
    """Direct cell-mean WAMPOS: stayers at the same baseline value are the controls."""
    df = pd.DataFrame({"d1": d[:, 0], "dd": d[:, 1] - d[:, 0], "dy": y[:, 1] - y[:, 0]})
    stayer_means = df[df.dd == 0].groupby("d1").dy.mean()
    out = {}
    for name, sel in (("delta2i", df.dd > 0), ("delta2d", df.dd < 0)):
        movers = df[sel]
        num = (movers.dy - movers.d1.map(stayer_means)).mean()
        out[name] = num / movers.dd.mean()
    share = (df.dd > 0).sum() / (df.dd != 0).sum()
    out["delta2"] = share * out["delta2i"] + (1 - share) * out["delta2d"]
    return out


@pytest.mark.parametrize("degree", [0, 1])
def test_discrete_equivalence(degree):
    rng = np.random.default_rng(4)
    n = 600
    d1 = rng.choice([0.0, 1.0, 2.0, 3.0], n)
    dd = np.where(rng.random(n) < 0.5, 0.0, rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 1.5, n))
    d = np.column_stack([d1, d1 + dd])
    y1 = rng.normal(size=n)
    y = np.column_stack([y1, y1 + d1 ** 2 * 0.3 + (1 + d1) * dd + rng.normal(size=n)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = wampos_reg(make_panel(d, y), bandwidth=0.5, degree=degree, min_ess=1)
    expected = cell_mean_wampos(d, y)
    for key, value in expected.items():
        assert abs(res[key].value - value) < 1e-12, key


# quasi-stayers ------------------------------------------------------------------------

def test_nostayers_matches_stayer_estimator(linear_panel):
    exact = ampos_reg(linear_panel)
    quasi = ampos_nostayers(linear_panel, delta_grid=[1e-9])
    assert abs(quasi.value - exact.value) < 1e-12
    assert quasi.ci_kind == "heuristic" and quasi.tuning["delta"] == 1e-9


def test_ps_nostayers_matches_ps_estimator(linear_panel):
    exact = wampos_ps(linear_panel)
    quasi = wampos_ps_nostayers(linear_panel, delta_grid=[1e-9])
    for key in ("delta2i", "delta2d", "delta2"):
        assert abs(quasi[key].value - exact[key].value) < 1e-12
    assert "warning" in quasi["delta2"].diagnostics


def test_ps_nostayers_constant_pscore():
    panel = sim(p_stay=0.0, dd_low=0.0, dd_high=1.0, n=500)
    res = wampos_ps_nostayers(panel, delta_grid=[0.2], degree=0)
    dd, dy = np.diff(panel.d, axis=1)[:, 0], np.diff(panel.y, axis=1)[:, 0]
    inc, ctrl = dd > 0.2, np.abs(dd) <= 0.2
    assert res["delta2i"].value == pytest.approx((dy[inc].mean() - dy[ctrl].mean()) / dd[inc].mean(), abs=1e-12)


def test_sensitivity_curve_structure():
    panel = sim(p_stay=0.0, dd_low=0.0, dd_high=1.0, n=1500)
    est = ampos_nostayers(panel, delta_grid=[0.02, 0.5, 0.1])
    curve = est.diagnostics["curve"]
    assert [p["delta"] for p in curve] == [0.5, 0.1, 0.02]
    assert all(p["feasible"] for p in curve)
    assert est.tuning["delta"] == 0.02 and est.value == curve[-1]["value"]


def test_headline_at_smallest_feasible_delta():
    panel = sim(p_stay=0.0, dd_low=0.0, dd_high=1.0, n=300)
    est = ampos_nostayers(panel, delta_grid=[0.3, 1e-6])
    assert est.tuning["delta"] == 0.3
    assert not est.diagnostics["curve"][1]["feasible"]
    with pytest.raises(NoQuasiStayers):
        ampos_nostayers(panel, delta_grid=[1e-6])


# long-run and dynamic effects ------------------------------------------------------------

def test_long_run_ell0_is_ampos(linear_panel):
    assert abs(long_run_reg(linear_panel, 0).value - ampos_reg(linear_panel).value) < 1e-12


def test_long_run_no_eligible_movers():
    n = 30
    d1 = np.linspace(0, 1, n)
    mover = np.arange(n) < 15
    d = np.column_stack([d1 + mover * k for k in range(4)])
    with pytest.raises(NoEligibleMovers):
        long_run_reg(make_panel(d, np.zeros((n, 4))), 2, bandwidth=1.0)


def test_dynamic_two_periods_collapse():
    panel = sim(n=800, p_increase=1.0, slope_sd=0.3)
    dyn = dynamic_effects(panel)
    reg = wampos_reg(panel)
    row = reg["delta2i"].diagnostics["per_t"][0]
    assert set(dyn) == {"delta_plus_0", "delta_D_plus_0", "delta_plus"}
    assert abs(dyn["delta_plus_0"].value - row["numerator"]) < 1e-12
    assert abs(dyn["delta_D_plus_0"].value - row["denominator"]) < 1e-12
    assert abs(dyn["delta_plus"].value - reg["delta2i"].value) < 1e-12
    ps = dynamic_effects(panel, method="pscore")
    psw = wampos_ps(panel)["delta2i"].diagnostics["per_t"][0]
    assert abs(ps["delta_plus_0"].value - psw["numerator"]) < 1e-12


def test_dynamic_no_movers():
    d = np.tile(np.linspace(0, 1, 10)[:, None], (1, 3))
    with pytest.raises(NoMovers):
        dynamic_effects(make_panel(d, np.zeros((10, 3))))


def test_dynamic_excludes_mixed_and_below():
    d = np.array([[0, 0, 0], [0, 1, 1], [0, 1, -1], [0, -1, -1], [1, 1, 1], [1, 2, 2], [0.5, 0.5, 0.5],
                  [0.5, 1.5, 1.5], [1, 1, 1], [0.2, 0.2, 0.2]], dtype=float)
    dyn = dynamic_effects(make_panel(d, np.zeros_like(d)), bandwidth=5.0, min_ess=1, ell_max=0)
    assert dyn.diagnostics["n_mixed_excluded"] == 1
    assert dyn.diagnostics["n_below_excluded"] == 1


def test_dynamic_sign_split():
    panel = sim(n=800, p_increase=0.5, slope_sd=0.3)
    dyn = dynamic_effects(panel, sign_split=True)
    d = panel.d
    dd = d[:, 1] - d[:, 0]
    up = make_panel(d[dd >= 0], panel.y[dd >= 0])
    down = make_panel(d[dd <= 0], panel.y[dd <= 0])
    assert abs(dyn["delta_plus"].value - dynamic_effects(up)["delta_plus"].value) < 1e-12
    # mirroring both treatment and outcome turns the below subsample into an above one
    mirrored = dynamic_effects(make_panel(-down.d, -down.y))
    for key in ("delta_plus_0", "delta_D_plus_0", "delta_plus"):
        assert abs(dyn[f"below/{key}"].value - mirrored[key].value) < 1e-12, key
    assert dyn["below/delta_D_plus_0"].value > 0


# TWFE ---------------------------------------------------------------------------------------

def test_twfe_collinear():
    d = np.tile(np.arange(5.0)[:, None], (1, 3))
    with pytest.raises(CollinearTreatment):
        twfe_reference(make_panel(d, np.zeros((5, 3))))


def test_twfe_homogeneous_slope():
    d = np.random.default_rng(0).uniform(0, 2, (500, 3))
    y = 2.0 * d + np.arange(500)[:, None] * 0.01 + np.array([0.0, 1.0, -1.0])
    assert twfe_reference(make_panel(d, y)).value == pytest.approx(2.0, abs=1e-10)


def test_twfe_matches_dummy_regression(rng):
    d = rng.uniform(0, 2, (40, 3))
    y = rng.normal(size=(40, 3))
    w = rng.uniform(0.5, 2, 40)
    X = np.column_stack([d.ravel(), np.kron(np.eye(40), np.ones((3, 1))), np.tile(np.eye(3)[:, 1:], (40, 1))])
    sw = np.sqrt(np.repeat(w, 3))
    beta = np.linalg.lstsq(X * sw[:, None], y.ravel() * sw, rcond=None)[0][0]
    assert twfe_reference(make_panel(d, y, w)).value == pytest.approx(beta, abs=1e-10)


def test_frozen_tuning_roundtrip(linear_panel):
    est = ampos_reg(linear_panel)
    again = ampos_reg(linear_panel, **frozen_tuning(est))
    assert again.value == est.value
    quasi = ampos_nostayers(linear_panel, delta_grid=[0.3, 1e-9])
    assert frozen_tuning(quasi)["delta_grid"] == [1e-9]
