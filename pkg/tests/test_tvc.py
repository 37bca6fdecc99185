import numpy as np
import pandas as pd
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from seatvc import tvc
from seatvc.simulator import simulate_tvc_panel
from seatvc.spline_basis import BasisError, BasisSpec, basis_matrix


def make_panel(df, covariates, response="y", **kw):
    return tvc.ModelPanel(df, response=response, covariates=covariates, **kw)


def sim_panel(truths, n_subjects=100, horizon=50, noise=0.1, seed=0, intercept=0.0):
    df = simulate_tvc_panel(n_subjects, horizon, truths, noise, seed, intercept)
    return make_panel(df, list(truths))


def test_standardize_examples():
    df = pd.DataFrame({"ad_id": [0, 0, 0, 0], "t": [0, .25, .5, 1.0],
                       "y": [1.0, 2, 3, 4], "x": [1.0, 2, 3, 4], "flag": [0, 1, 1, 0]})
    panel = tvc.standardize(make_panel(df, ["x", "flag"]))
    sd = np.sqrt(1.25)
    np.testing.assert_allclose(panel.data["x"], (df["x"] - 2.5) / sd)
    np.testing.assert_array_equal(panel.data["flag"], df["flag"])
    assert panel.scaling == {"x": pytest.approx((2.5, sd))}
    again = tvc.standardize(panel, ["x"])
    assert again.scaling["x"] == pytest.approx((2.5, sd))


def test_standardize_zero_variance():
    df = pd.DataFrame({"ad_id": [0, 0], "t": [0, 1.0], "y": [1.0, 2], "x": [3.0, 3.0]})
    with pytest.raises(tvc.PanelError, match="'x' has zero variance"):
        tvc.standardize(make_panel(df, ["x"]), ["x"])


def test_build_design_row_matches_symbolic_expansion():
    t, x = sp.symbols("t x")
    knot = sp.Rational(1, 2)
    basis = [sp.Integer(1), t, sp.Piecewise((t - knot, t > knot), (0, True))]
    row = {t: sp.Rational(3, 4), x: 2}
    fixed_oracle = [float(b.subs(row)) for b in basis[:2]] + [float((x * b).subs(row)) for b in basis[:2]]
    random_oracle = [float(basis[2].subs(row)), float((x * basis[2]).subs(row))]
    df = pd.DataFrame({"ad_id": [0], "t": [0.75], "y": [0.0], "x": [2.0]})
    design = tvc.build_design(make_panel(df, ["x"]), BasisSpec(order_q=1, knots=[0.5]))
    np.testing.assert_allclose(design.fixed_matrix[0], fixed_oracle)
    np.testing.assert_allclose([Z[0, 0] for Z in design.random_blocks], random_oracle)
    assert fixed_oracle == [1, .75, 2, 1.5] and random_oracle == [.25, .5]


@pytest.mark.parametrize("q, H, K", [(3, 5, 2), (0, 0, 3), (2, 4, 0)])
def test_design_column_counts(q, H, K):
    panel = sim_panel({f"x{k}": 0.5 for k in range(K)}, n_subjects=5, horizon=20)
    d = tvc.build_design(panel, BasisSpec(order_q=q, knots=np.linspace(0, 1, H + 2)[1:-1]))
    assert d.p == (K + 1) * (q + 1)
    assert sum(d.block_sizes) == (K + 1) * H
    assert len(d.random_blocks) == (K + 1 if H else 0)


def test_flat_truth_gives_flat_estimate():
    panel = sim_panel({"x": 0.4}, n_subjects=40, horizon=50, noise=0.5, seed=3)
    assert panel.n == 2000
    model = tvc.fit(panel, BasisSpec.from_times(panel.data["t"], 3, 10))
    est = model.eval_coefficient("x", np.linspace(0, 1, 101)).estimate
    assert est.max() - est.min() <= 0.05


def test_sinusoid_recovered():
    truth = {"kind": "sinusoid", "amplitude": 1.0, "frequency": 1.0}
    panel = sim_panel({"x": truth}, n_subjects=100, horizon=50, noise=1.0, seed=4)
    model = tvc.fit(panel, BasisSpec.from_times(panel.data["t"], 3, 15))
    grid = np.linspace(0, 1, 201)
    est = model.eval_coefficient("x", grid).estimate
    assert np.sqrt(np.mean((est - np.sin(2 * np.pi * grid)) ** 2)) <= 0.1


def test_constant_model_is_ols():
    panel = sim_panel({"x1": 0.3, "x2": -1.0}, n_subjects=10, horizon=20, seed=5)
    model = tvc.fit(panel, BasisSpec(order_q=0))
    X = np.column_stack([np.ones(panel.n), panel.data["x1"], panel.data["x2"]])
    ols = np.linalg.lstsq(X, panel.data["y"], rcond=None)[0]
    np.testing.assert_allclose(model.coefficients, ols, atol=1e-8)


def test_zero_coefficients_estimated_near_zero():
    panel = sim_panel({"x": 0.0}, n_subjects=50, horizon=40, noise=0.2, seed=6)
    model = tvc.fit(panel, BasisSpec.from_times(panel.data["t"], 2, 8))
    tr = model.eval_coefficient("x", np.linspace(0, 1, 51))
    assert np.all(np.abs(tr.estimate) <= 3 * tr.se + 1e-3)


def test_noiseless_polynomial_exact():
    truth = {"kind": "polynomial", "coeffs": [0.2, -0.5, 1.0, 0.3]}
    panel = sim_panel({"x": truth}, n_subjects=10, horizon=30, noise=0.0, seed=7,
                      intercept={"kind": "polynomial", "coeffs": [1.0, 0.5]})
    model = tvc.fit(panel, BasisSpec.from_times(panel.data["t"], 3, 4))
    grid = np.linspace(0, 1, 41)
    want = np.polynomial.polynomial.polyval(grid, truth["coeffs"])
    np.testing.assert_allclose(model.eval_coefficient("x", grid).estimate, want, atol=1e-6)


def test_single_point_grid():
    panel = sim_panel({"x": 1.0}, n_subjects=5, horizon=20, seed=8)
    model = tvc.fit(panel, BasisSpec.from_times(panel.data["t"], 1, 2))
    tr = model.eval_coefficient("x", 0.5)
    assert tr.estimate.shape == (1,) and tr.se.shape == (1,)


@pytest.fixture(scope="module")
def fitted_pair():
    df = simulate_tvc_panel(30, 25, {"x1": {"kind": "sinusoid", "amplitude": 0.5}, "x2": 0.7},
                            0.2, 9, intercept=1.0)
    df["x1"] = 3.0 + 2.0 * df["x1"]
    raw = make_panel(df, ["x1", "x2"])
    std = tvc.standardize(raw)
    spec = BasisSpec.from_times(df["t"], 2, 5)
    return raw, std, tvc.fit(std, spec)


def test_predict_reproduces_fitted(fitted_pair):
    raw, std, model = fitted_pair
    np.testing.assert_allclose(model.predict(std), model.fitted, atol=1e-10)
    np.testing.assert_allclose(model.predict(raw.data), model.fitted, atol=1e-10)


def test_predict_intercept_only_when_covariates_zero(fitted_pair):
    _, std, model = fitted_pair
    grid = np.linspace(0, 1, 11)
    rows = pd.DataFrame({"t": grid, "x1": 0.0, "x2": 0.0})
    want = model.eval_coefficient("intercept", grid, scale="raw").estimate
    np.testing.assert_allclose(model.predict(rows), want, atol=1e-10)


def test_predict_extrapolation_policy(fitted_pair):
    _, _, model = fitted_pair
    rows = pd.DataFrame({"t": [1.2], "x1": [3.0], "x2": [0.0]})
    with pytest.raises(BasisError):
        model.predict(rows)
    clamped = model.predict(rows, extrapolation_policy="clamp")
    at_edge = model.predict(rows.assign(t=1.0))
    np.testing.assert_allclose(clamped, at_edge)


def test_raw_scale_slope_is_divided_by_sd(fitted_pair):
    _, std, model = fitted_pair
    grid = np.linspace(0, 1, 5)
    s = std.scaling["x1"][1]
    np.testing.assert_allclose(model.eval_coefficient("x1", grid, "raw").estimate,
                               model.eval_coefficient("x1", grid).estimate / s)


def test_covariate_order_invariance():
    df = simulate_tvc_panel(20, 25, {"a": 0.5, "b": {"kind": "polynomial", "coeffs": [0, 1]}}, 0.3, 10)
    spec = BasisSpec.from_times(df["t"], 2, 4)
    m1 = tvc.fit(make_panel(df, ["a", "b"]), spec)
    m2 = tvc.fit(make_panel(df, ["b", "a"]), spec)
    grid = np.linspace(0, 1, 21)
    assert m1.lambdas == pytest.approx(m2.lambdas, rel=1e-6)
    for name in ("intercept", "a", "b"):
        np.testing.assert_allclose(m1.eval_coefficient(name, grid).estimate,
                                   m2.eval_coefficient(name, grid).estimate, atol=1e-10)


def test_infinite_penalty_is_polynomial_interaction_ols():
    df = simulate_tvc_panel(20, 25, {"x": 0.5}, 0.3, 11)
    spec = BasisSpec.from_times(df["t"], 2, 4)
    model = tvc.fit(make_panel(df, ["x"]), spec, lambdas=1e12)
    t, x = df["t"].to_numpy(), df["x"].to_numpy()
    P = np.vander(t, 3, increasing=True)
    ols = np.linalg.lstsq(np.hstack([P, x[:, None] * P]), df["y"], rcond=None)[0]
    grid = np.linspace(0, 1, 11)
    G = np.vander(grid, 3, increasing=True)
    np.testing.assert_allclose(model.eval_coefficient("x", grid).estimate, G @ ols[3:], atol=1e-6)


def test_nested_restricted_likelihood_ordering():
    df = simulate_tvc_panel(30, 30, {"x": {"kind": "sinusoid", "amplitude": 0.5}}, 0.3, 12)
    panel = make_panel(df, ["x"])
    knots = tuple(np.linspace(0, 1, 7)[1:-1])
    m_big = tvc.fit(panel, BasisSpec(order_q=3, knots=knots))
    # lambda huge on every block: the truncated terms are switched off
    m_small = tvc.fit(panel, BasisSpec(order_q=3, knots=knots), lambdas=1e12)
    assert m_big.stats["neg2_res_log_likelihood"] <= m_small.stats["neg2_res_log_likelihood"] + 1e-6


def test_archive_roundtrip(tmp_path, fitted_pair):
    _, std, model = fitted_pair
    path = tmp_path / "model.json"
    model.save(path)
    back = tvc.FittedTvcModel.load(path)
    grid = np.linspace(0, 1, 7)
    np.testing.assert_array_equal(back.eval_coefficient("x1", grid, "raw").estimate,
                                  model.eval_coefficient("x1", grid, "raw").estimate)
    np.testing.assert_array_equal(back.predict(std), model.predict(std))


def test_archive_tamper_detected(fitted_pair):
    _, _, model = fitted_pair
    d = model.to_dict()
    d["spec"]["knots"][0] += 0.01
    with pytest.raises(BasisError):
        tvc.FittedTvcModel.from_dict(d)


def test_unknown_covariate(fitted_pair):
    _, _, model = fitted_pair
    with pytest.raises(KeyError, match="unknown covariate"):
        model.eval_coefficient("nope", [0.5])


def test_panel_validation():
    df = pd.DataFrame({"ad_id": [0, 0], "t": [0.5, 0.5], "y": [1.0, 2], "x": [1.0, 2]})
    with pytest.raises(tvc.PanelError, match="duplicate"):
        make_panel(df, ["x"])
    with pytest.raises(tvc.PanelError, match="missing"):
        make_panel(df.drop(columns="x"), ["x"])
    bad = df.assign(t=[0.5, 0.6], x=[np.nan, 1.0])
    with pytest.raises(tvc.PanelError, match="non-finite"):
        make_panel(bad, ["x"])
    with pytest.raises(tvc.PanelError, match="increasing"):
        make_panel(df.assign(t=[0.6, 0.5]), ["x"])


def test_write_trajectories(tmp_path, fitted_pair):
    _, _, model = fitted_pair
    grid = np.linspace(0, 1, 5)
    trajs = [model.eval_coefficient(n, grid, "raw") for n in ("intercept", "x1")]
    frame = tvc.write_trajectories(trajs, tmp_path / "a.csv", tmp_path / "a.json")
    back = pd.read_csv(tmp_path / "a.csv", float_precision="round_trip")
    assert len(back) == 10
    np.testing.assert_array_equal(back["estimate"].to_numpy(), frame["estimate"].to_numpy())


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 5), st.integers(0, 1000))
def test_affine_covariate_rescaling_invariant(shift, scale, seed):
    df = simulate_tvc_panel(8, 15, {"x": 0.5}, 0.3, seed, intercept=1.0)
    spec = BasisSpec.from_times(df["t"], 1, 2)
    a = tvc.fit(tvc.standardize(make_panel(df, ["x"])), spec, lambdas=3.0)
    df2 = df.assign(x=shift + scale * df["x"])
    b = tvc.fit(tvc.standardize(make_panel(df2, ["x"])), spec, lambdas=3.0)
    grid = np.linspace(0, 1, 5)
    np.testing.assert_allclose(b.eval_coefficient("x", grid, "raw").estimate * scale,
                               a.eval_coefficient("x", grid, "raw").estimate, atol=1e-8)
    np.testing.assert_allclose(b.fitted, a.fitted, atol=1e-8)
