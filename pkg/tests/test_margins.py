import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from mdam.dataset import (
    BINARY,
    CATEGORICAL,
    AuxiliaryMargins,
    CompletedDataset,
    MarginEntry,
    VariableSpec,
    make_table,
)
from mdam.glm import DesignSpec
from mdam.margins import (
    ADJUSTED,
    DESIGN_KNOWN,
    EPS,
    POISSON,
    PPS,
    ChainLink,
    MarginChain,
    WeightError,
    build_weights,
    calibrate_v,
    draw_targets,
    impute_margin_vars,
    solve_theta,
    total_variance,
)

S = VariableSpec("S", BINARY, has_margin=True)
E = VariableSpec("E", CATEGORICAL, ("a", "b", "c"), has_margin=True)


def _unit_table(n_resp, n_unit, weights=None, N=None, rng=None):
    rng = rng or np.random.default_rng(0)
    s = list(rng.integers(0, 2, n_resp).astype(float)) + [None] * n_unit
    w = list(weights if weights is not None else np.ones(n_resp)) + [np.nan] * n_unit
    return make_table((S,), {"S": s}, weights=w, population_size=N)


def test_calibrate_census_zero():
    t = make_table((S,), {"S": [0, 1, 1, 0]})
    c = CompletedDataset(t, t.values, t.item_mask)
    m = calibrate_v(c, AuxiliaryMargins((MarginEntry("S", 1, 2.0),)), np.ones(4))
    assert m.entries[0].variance == 0.0


def test_single_unit_variance_90():
    assert total_variance([10.0], [1.0], POISSON) == 90.0


def test_pps_variance_formula():
    w = np.array([2.0, 4.0, 5.0])
    z = np.array([1.0, 0.0, 1.0])
    T = np.sum(w * z)
    expected = 3 / 2 * np.sum((w * z - T / 3) ** 2)
    assert total_variance(w, z, PPS) == pytest.approx(expected)
    with pytest.raises(ValueError):
        calibrate_v(
            CompletedDataset(make_table((S,), {"S": [1]}), np.array([[1.0]]), np.zeros((1, 1), bool)),
            AuxiliaryMargins((MarginEntry("S", 1, 1.0),)),
            np.ones(1),
            design=None,
        )


def test_poisson_variance_unbiased_monte_carlo():
    r = np.random.default_rng(5)
    N = 400
    pi = r.uniform(0.05, 0.6, N)
    y = r.integers(0, 2, N).astype(float)
    est, var = [], []
    for _ in range(2000):
        take = r.random(N) < pi
        w = 1 / pi[take]
        est.append(np.sum(w * y[take]))
        var.append(total_variance(w, y[take]))
    assert abs(np.mean(var) / np.var(est, ddof=1) - 1) < 0.05


def test_draw_targets_hand_case():
    # T=60, respondents weighted count 40, unit NR weight 40 over n_U=4
    var = S
    col = np.array([1, 1, 1, 1, np.nan, np.nan, np.nan, np.nan])
    w = np.array([10, 10, 10, 10, 10, 10, 10, 10], float)
    unit = np.isnan(col)
    m = AuxiliaryMargins((MarginEntry("S", 1, 60.0, 0.0),))
    d = draw_targets(var, m, col, w, unit, np.random.default_rng(1), population_size=80.0)
    assert d.totals[1] == 60.0
    assert d.counts[1] == pytest.approx(2.0)
    np.testing.assert_allclose(d.proportions, [0.5, 0.5])


def test_draw_targets_clamps_negative():
    col = np.array([1, 1, 1, 1, np.nan, np.nan])
    w = np.full(6, 10.0)
    m = AuxiliaryMargins((MarginEntry("S", 1, 20.0, 0.0),))
    d = draw_targets(S, m, col, w, np.isnan(col), np.random.default_rng(1), population_size=60.0)
    assert d.counts[1] < 0
    assert d.proportions[1] == pytest.approx(EPS / (EPS + 1 - EPS))
    assert d.proportions.sum() == pytest.approx(1.0)


def test_draw_targets_requires_unit_nr():
    with pytest.raises(ValueError):
        draw_targets(S, AuxiliaryMargins((MarginEntry("S", 1, 1.0, 1.0),)), np.ones(3), np.ones(3),
                     np.zeros(3, bool), np.random.default_rng(0))


def test_solve_theta_examples():
    assert solve_theta(np.ones((5, 1)), np.array([0.3]), np.array([0.5, 0.5]))[0] == pytest.approx(-0.3)
    th = solve_theta(np.ones((3, 1)), np.zeros(2), np.array([1 / 3, 1 / 3, 1 / 3]))
    np.testing.assert_allclose(th, 0.0, atol=1e-15)
    X = np.array([[1.0, 0.0], [1.0, 1.0]])
    coef = np.array([0.2, 1.0])  # mean eta = 0.7
    assert solve_theta(X, coef, np.array([0.75, 0.25]))[0] == pytest.approx(np.log(1 / 3) - 0.7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5), st.integers(1, 30))
def test_solve_theta_exactness(seed, m, n):
    r = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), r.standard_normal((n, 2))])
    coef = r.standard_normal((m - 1) * 3)
    p = r.dirichlet(np.ones(m))
    p = np.clip(p, 1e-3, None)
    p /= p.sum()
    th = solve_theta(X, coef, p)
    eta = X @ coef.reshape(m - 1, 3).T + th
    np.testing.assert_allclose(eta.mean(axis=0), np.log(p[1:] / p[0]), atol=1e-10)


def test_build_weights_eq7():
    t = _unit_table(3, 2, weights=[30.0, 30.0, 20.0], N=100.0)
    w = build_weights(t, DESIGN_KNOWN)
    np.testing.assert_allclose(w[3:], [10.0, 10.0])
    assert w.sum() == pytest.approx(100.0)
    bad = _unit_table(2, 1, weights=[60.0, 60.0], N=100.0)
    with pytest.raises(WeightError, match="adjusted"):
        build_weights(bad, DESIGN_KNOWN)


def test_build_weights_eq14():
    t = _unit_table(2, 2, weights=[2.0, 4.0])
    w = build_weights(t, ADJUSTED)
    np.testing.assert_allclose(w, [1.0, 2.0, 1.5, 1.5])
    assert w.sum() == pytest.approx(6.0)


def test_zero_unit_nr_weights_unchanged():
    t = make_table((S,), {"S": [0, 1]}, weights=[3.0, 4.0], population_size=10.0)
    np.testing.assert_array_equal(build_weights(t), [3.0, 4.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1.0, 100.0), min_size=1, max_size=20), st.integers(1, 10))
def test_weight_totals(resp_w, n_unit):
    N = sum(resp_w) * 1.5 + 1
    t = _unit_table(len(resp_w), n_unit, weights=resp_w, N=N)
    assert build_weights(t, DESIGN_KNOWN).sum() == pytest.approx(N, rel=1e-12)
    assert build_weights(t, ADJUSTED).sum() == pytest.approx(sum(resp_w), rel=1e-12)


def test_chain_validation():
    schema = (S, E)
    good = MarginChain.sequential(["S", "E"], schema=schema)
    good.validate(schema)
    bad = MarginChain((ChainLink("S", DesignSpec.from_strings("S", ["E"], schema)),))
    with pytest.raises(ValueError, match="earlier"):
        bad.validate(schema)
    bad = MarginChain((ChainLink("S", DesignSpec.from_strings("S", ["R(E)"], schema)),))
    with pytest.raises(ValueError):
        bad.validate(schema)


def test_zero_unit_nr_no_op():
    t = make_table((S,), {"S": [0, 1]}, population_size=10.0)
    c = CompletedDataset(t, t.values, t.item_mask)
    assert impute_margin_vars(c, MarginChain.sequential(["S"]), None, np.ones(2), np.random.default_rng(0)) is c


def test_large_nu_hits_margins():
    # V -> 0, intercept-only chain, 1e5 unit nonrespondents
    r = np.random.default_rng(3)
    n_resp, n_unit = 2000, 100_000
    s = r.integers(0, 2, n_resp).astype(float)
    e = (1 + r.integers(0, 3, n_resp)).astype(float)
    t = make_table(
        (S, E),
        {"S": list(s) + [None] * n_unit, "E": list(e) + [None] * n_unit},
        weights=list(np.full(n_resp, 5.0)) + [np.nan] * n_unit,
        population_size=10_000.0 + n_unit * 2.0,
    )
    w = build_weights(t)
    N = t.population_size
    margins = AuxiliaryMargins((
        MarginEntry("S", 1, 0.3 * N, 1e-12),
        MarginEntry("E", 2, 0.5 * N, 1e-12),
        MarginEntry("E", 3, 0.2 * N, 1e-12),
    ))
    chain = MarginChain((
        ChainLink("S", DesignSpec("S", ())),
        ChainLink("E", DesignSpec("E", ())),
    ))
    c = CompletedDataset(t, t.values, np.zeros_like(t.item_mask))
    out = impute_margin_vars(c, chain, margins, w, r)
    for e_ in margins.entries:
        est = np.sum(w * (out.column(e_.variable) == e_.level))
        assert abs(est - e_.total) / e_.total < 0.02
    np.testing.assert_array_equal(out.values[:n_resp], t.values[:n_resp])
