import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.covariate_lab import (
    CovariateMatrix,
    add_zone_dummies,
    apply_recipe,
    composite,
    correlation,
    correlation_report,
    dichotomize_tradition,
    load_covariates,
    residualize,
    standardize,
)
from flowcast.errors import (
    PerfectCollinearity,
    UnknownZone,
    ValidationError,
    ZeroDenominator,
    ZeroVariance,
)
from flowcast.synth_oracle import (
    COVARIATES,
    DEFAULT_RECIPE,
    SynthSpec,
    implied_correlations,
    raw_covariates,
    simulate,
)

vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=30).filter(
    lambda v: np.std(v) > 1e-3 * max(1.0, np.max(np.abs(v))))


def test_constant_vector_raises():
    with pytest.raises(ZeroVariance):
        standardize([3.0, 3.0, 3.0])


def test_table_summary_value():
    # four values with mean exactly 60.0 and population sd exactly 23.9, one of them 93.0
    d = np.sqrt(2 * 23.9 ** 2 - 33.0 ** 2)
    x = np.array([93.0, 27.0, 60.0 + d, 60.0 - d])
    assert x.mean() == pytest.approx(60.0) and x.std() == pytest.approx(23.9)
    assert standardize(x)[0] == pytest.approx(1.381, abs=5e-4)


@settings(max_examples=60, deadline=None)
@given(vectors)
def test_standardize_moments_and_idempotence(v):
    z = standardize(v)
    assert abs(z.mean()) < 1e-10
    assert abs(z.var() - 1) < 1e-8
    assert np.allclose(standardize(z), z, atol=1e-10)
    zi = standardize(v, invert=True)
    assert np.allclose(zi, -z)
    assert abs(zi.var() - 1) < 1e-8


def test_composite_single_component_equals_standardize():
    x = np.array([1.0, 4.0, 2.0, 8.0])
    assert np.allclose(composite([x]), standardize(x))


def test_composite_perfectly_correlated():
    x = np.array([1.0, 4.0, 2.0, 8.0])
    assert np.allclose(composite([x, 3 * x + 2]), standardize(x))


@settings(max_examples=40, deadline=None)
@given(vectors, st.randoms(use_true_random=False))
def test_composite_order_invariant(v, rnd):
    v = np.array(v)
    w = v[::-1] + np.arange(len(v)) ** 1.5
    u = np.sin(np.arange(len(v)) * 1.3) + 0.01 * v
    parts = [v, w, u]
    flags = [False, True, False]
    order = list(range(3))
    rnd.shuffle(order)
    a = composite(parts, flags)
    b = composite([parts[k] for k in order], [flags[k] for k in order])
    assert np.allclose(a, b, atol=1e-10)


def test_ksoc_matches_hand_recomputation():
    data = simulate(SynthSpec(seed=4))
    raw = data.raw_covariates.columns
    names = ["vol_institutions", "volunteers", "vol_orgs", "referendum_turnout"]
    zs = []
    for n in names:
        x = raw[n]
        m = sum(x) / len(x)
        sd = (sum((xi - m) ** 2 for xi in x) / len(x)) ** 0.5
        zs.append([-(xi - m) / sd for xi in x])
    avg = [sum(col) / 4 for col in zip(*zs)]
    m = sum(avg) / len(avg)
    sd = (sum((a - m) ** 2 for a in avg) / len(avg)) ** 0.5
    hand = np.array([(a - m) / sd for a in avg])
    assert np.allclose(data.covariates.columns["ksoc"], hand, atol=1e-12)


def test_residualize_orthogonal_input_unchanged():
    y = standardize([1.0, -1.0, 1.0, -1.0])
    on = standardize([1.0, 1.0, -1.0, -1.0])
    assert np.allclose(residualize(y, on), y)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(-5, 5).filter(lambda a: abs(a) > 1e-2), st.floats(-100, 100))
def test_residualize_properties(v, scale, shift):
    v = np.array(v)
    n = len(v)
    on = standardize(np.cos(np.arange(n) * 0.7) + 0.3 * np.arange(n))
    y = standardize(v)
    if abs(correlation(y, on)) > 1 - 1e-6:
        return
    r = residualize(y, on)
    assert abs(correlation(r, on)) < 1e-10
    assert abs(r.var() - 1) < 1e-8
    assert np.allclose(residualize(y, scale * on + shift), r, atol=1e-10)


def test_residualize_collinear():
    on = np.array([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(PerfectCollinearity):
        residualize(2 * on + 1, on)


def test_residualization_lowers_pairwise_correlations():
    # population values implied by the generator's latent structure
    names, R = implied_correlations()
    i = names.index
    for a, b in [("skill", "income"), ("skill", "educ"), ("income", "educ")]:
        # before residualization the raw variables correlate at 0.8*0.8 + 0.36*0.35
        before = 0.8 * 0.8 + (1 - 0.8 ** 2) * 0.35
        assert R[i(a), i(b)] == pytest.approx(0.35, abs=1e-12)
        assert R[i(a), i(b)] < before
    # and in a large sample drawn from the generator
    spec = SynthSpec(zones=4000)
    raw = raw_covariates(spec, np.random.default_rng(0))
    X = apply_recipe(raw, DEFAULT_RECIPE)
    pre = correlation(X.columns["skill_raw"], raw.columns["low_income_pct"])
    post = correlation(X.columns["skill"], X.columns["income"])
    assert abs(pre) > 0.7 and post < abs(pre) - 0.3


def test_dichotomize():
    assert dichotomize_tradition([160.0], [100.0]).tolist() == [1.0]
    assert dichotomize_tradition([150.0], [100.0]).tolist() == [0.0]
    with pytest.raises(ZeroDenominator):
        dichotomize_tradition([1.0], [0.0])


def test_lefttrad_matches_hand_arithmetic():
    data = simulate(SynthSpec(seed=9))
    pci = data.raw_covariates.columns["pci1987"]
    dc = data.raw_covariates.columns["dc1987"]
    hand = [1.0 if a > 1.5 * b else 0.0 for a, b in zip(pci, dc)]
    assert data.covariates.columns["lefttrad"].tolist() == hand
    assert 0 < sum(hand) < len(hand)


def test_correlation_report_and_flags():
    zones = tuple("abcdef")
    g = standardize([1.0, 2.0, 3.0, 4.0, 5.0, 7.0])
    other = standardize([2.0, 1.0, 4.0, 3.0, 6.0, 5.0])
    M = CovariateMatrix(zones, {"geog": g, "r": residualize(other, g), "close": g + 0.01 * other})
    rep = correlation_report(M)
    R = rep["matrix"]
    assert np.allclose(np.diag(R), 1.0)
    assert abs(R[0, 1]) < 1e-10
    assert [(a, b) for a, b, _ in rep["flagged"]] == [("geog", "close")]
    with pytest.raises(ValidationError):
        correlation_report(M.select(["geog"]))


def test_recovery_geog_correlation_recovered():
    spec = SynthSpec(zones=5000)
    raw = raw_covariates(spec, np.random.default_rng(1))
    X = apply_recipe(raw, DEFAULT_RECIPE, keep=COVARIATES)
    r = correlation(X.columns["recovery"], X.columns["geog"])
    # standard error of r near -0.75 at n = 5000 is about 0.006
    assert r == pytest.approx(-0.75, abs=0.03)


def test_recipe_outputs_are_standardized_and_provenanced():
    data = simulate(SynthSpec(seed=2))
    X = data.covariates
    for n in X.names:
        col = X.columns[n]
        if X.dichotomous(n):
            assert set(np.unique(col)) <= {0.0, 1.0}
        else:
            assert abs(col.mean()) < 1e-10 and abs(col.var() - 1) < 1e-8
    assert X.transforms["skill"]["op"] == "residualize"
    assert X.transforms["skill"]["from"]["invert"] is True
    assert abs(correlation(X.columns["educ"], X.columns["geog"])) < 1e-10


def test_recipe_rejects_unknown_things():
    raw = CovariateMatrix(("a", "b", "c"), {"x": [1.0, 2.0, 4.0]})
    with pytest.raises(ValidationError):
        apply_recipe(raw, [{"name": "y", "op": "bogus", "input": "x"}])
    with pytest.raises(ValidationError):
        apply_recipe(raw, [{"name": "y", "op": "standardize", "input": "nope"}])
    with pytest.raises(ValidationError):
        apply_recipe(raw, [{"name": "y", "op": "standardize", "input": "x", "extra": 1}])


def test_load_covariates(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("zone_id,a,b\n1,1.5,2\n2,3,4\n", encoding="utf-8")
    M = load_covariates(p)
    assert M.zone_ids == ("1", "2")
    assert M.columns["a"].tolist() == [1.5, 3.0]
    p.write_text("zone_id,a\n1,\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_covariates(p)


def test_add_zone_dummies():
    M = CovariateMatrix(("1", "2", "3"), {"x": [1.0, 2.0, 3.0]})
    assert add_zone_dummies(M, []).names == ("x",)
    D = add_zone_dummies(M, ["2"])
    assert D.columns["zone_2"].tolist() == [0.0, 1.0, 0.0]
    assert D.dichotomous("zone_2")
    with pytest.raises(UnknownZone):
        add_zone_dummies(M, ["9"])
