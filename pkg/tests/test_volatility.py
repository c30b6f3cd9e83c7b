import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowcast.ei_estimator import FlowTable
from flowcast.errors import MissingAbstention, OptionMismatch, ValidationError, ZeroRowTotal, ZeroVariance
from flowcast.reports import table1_rows
from flowcast.volatility import (
    MINOR_CATEGORY_NOTE,
    VolatilityRecord,
    aggregate_region,
    display_round,
    loyalty_targets,
    row_percentages,
    volatility_correlation,
    volatility_indexes,
    write_volatility_csv,
)

# lower panel of the published regional table
TABLE1_PERCENT = np.array([
    [38.5, 4.4, 2.8, 12.7, 12.3, 29.3],
    [4.7, 58.1, 8.3, 5.7, 3.3, 20.0],
    [0.4, 0.4, 15.9, 30.3, 39.4, 13.7],
    [0.7, 0.0, 0.5, 60.3, 22.4, 16.2],
    [6.2, 2.9, 3.4, 7.6, 4.4, 75.6],
])


def test_table1_percentages(table1):
    pct = row_percentages(table1)
    assert np.abs(pct - TABLE1_PERCENT).max() <= 0.1
    assert np.array_equal(display_round(pct[[0, 3]]), TABLE1_PERCENT[[0, 3]])


def test_one_hot_row():
    assert row_percentages(np.array([[0.0, 5.0, 0.0]])).tolist() == [[0.0, 100.0, 0.0]]


def test_zero_row_total():
    with pytest.raises(ZeroRowTotal):
        row_percentages(np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_display_round_half_away_from_zero():
    assert display_round([0.05, 0.15, 0.25, -0.35, 2.449]).tolist() == [0.1, 0.2, 0.3, -0.4, 2.4]


@settings(max_examples=60, deadline=None)
@given(arrays(float, (4, 5), elements=st.floats(0.0, 1e4)).filter(lambda a: (a.sum(1) > 1).all()))
def test_rows_sum_to_100(F):
    pct = row_percentages(F)
    assert np.allclose(pct.sum(axis=1), 100.0, atol=1e-10)
    assert np.all(np.abs(display_round(pct).sum(axis=1) - 100.0) <= 0.1 * F.shape[1] / 2 + 1e-9)


def test_loyalty_fixture(table1):
    rec = volatility_indexes(table1)
    assert rec.loyalty_pct["PD"] == pytest.approx(100 * 69.6 / 119.7)
    assert round(rec.loyalty_pct["PD"], 1) == 58.1
    assert round(rec.loyalty_pct["Lega"], 1) == 60.3


def test_volatility_arithmetic(table1):
    rec = volatility_indexes(table1, notes=(MINOR_CATEGORY_NOTE,))
    assert rec.party_switch_pct == pytest.approx(100 * 131.6 / 405.6, abs=1e-9)
    assert rec.to_abstention_pct == pytest.approx(100 * 85.8 / 405.6, abs=1e-9)
    assert abs(rec.party_switch_pct - 32.4) < 0.1
    assert abs(rec.to_abstention_pct - 21.2) < 0.1
    assert rec.notes == (MINOR_CATEGORY_NOTE,)


def test_containment_rule(table1):
    targets = loyalty_targets(table1.origin_labels, table1.destination_labels, "containment")
    dests = table1.destination_labels
    assert dests[targets["M5S"]] == "M5S-OL"
    assert dests[targets["FI"]] == "Lega-FI-OCR"
    assert dests[targets["Lega"]] == "Lega-FI-OCR"
    rec = volatility_indexes(table1, loyalty="containment")
    assert rec.loyalty_rule == "containment"
    assert any("FI->Lega-FI-OCR" in n for n in rec.notes)
    assert rec.loyalty_pct["Lega"] == pytest.approx(100 * 22.0 / 98.4)


def test_explicit_loyalty_map(table1):
    rec = volatility_indexes(table1, loyalty={"Lega": "Lega-FI-OCR"})
    assert set(rec.loyalty_pct) == {"Lega", "No vote"}
    with pytest.raises(ValidationError):
        loyalty_targets(table1.origin_labels, table1.destination_labels, {"X": "PD"})


def test_identity_flows_zero_volatility():
    labels = ("A", "B", "No vote")
    rec = volatility_indexes(FlowTable.from_counts("z", labels, labels, np.diag([5.0, 3.0, 2.0])))
    assert rec.party_switch_pct == 0 and rec.to_abstention_pct == 0
    assert rec.loyalty_pct == {"A": 100.0, "B": 100.0, "No vote": 100.0}


def test_missing_abstention():
    F = FlowTable.from_counts("z", ("A", "B"), ("A", "B"), np.eye(2))
    with pytest.raises(MissingAbstention):
        volatility_indexes(F)


@settings(max_examples=60, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(0.01, 1e4)), st.floats(1e-3, 1e3))
def test_scaling_invariance_and_bounds(F, c):
    labels = ("A", "B", "No vote")
    a = volatility_indexes(FlowTable.from_counts("z", labels, labels, F))
    b = volatility_indexes(FlowTable.from_counts("z", labels, labels, c * F))
    assert abs(a.party_switch_pct - b.party_switch_pct) < 1e-10
    assert abs(a.to_abstention_pct - b.to_abstention_pct) < 1e-10
    assert a.party_switch_pct >= 0 and a.to_abstention_pct >= 0
    assert a.party_switch_pct + a.to_abstention_pct <= 100 + 1e-9


def test_aggregate_region_basic(table1):
    assert np.array_equal(aggregate_region([table1]).F, table1.F)
    doubled = aggregate_region([table1, table1])
    assert np.array_equal(doubled.F, 2 * table1.F)
    assert np.array_equal(doubled.row_margins, 2 * table1.row_margins)
    other = FlowTable.from_counts("z", table1.destination_labels, table1.origin_labels, table1.F.T)
    with pytest.raises(OptionMismatch):
        aggregate_region([table1, other])


@settings(max_examples=40, deadline=None)
@given(arrays(float, (4, 3, 3), elements=st.floats(0.1, 1e3)))
def test_region_percentages_are_count_weighted(Fs):
    labels = ("A", "B", "C")
    tables = [FlowTable.from_counts(str(k), labels, labels, F) for k, F in enumerate(Fs)]
    reg = row_percentages(aggregate_region(tables))
    rows = Fs.sum(axis=2)
    weighted = sum(rows[k][:, None] * row_percentages(t) for k, t in enumerate(tables)) \
        / rows.sum(axis=0)[:, None]
    assert np.allclose(reg, weighted, atol=1e-10)


def test_synthetic_region_matches_margins(small_synth):
    from flowcast.ei_estimator import fit_zone, flow_counts
    _, zones = small_synth
    flows = [flow_counts(fit_zone(z), z) for z in zones]
    reg = aggregate_region(flows)
    rows = sum(z.origin_counts.sum(axis=0) for z in zones)
    cols = sum(z.destination_counts.sum(axis=0) for z in zones)
    assert np.allclose(reg.F.sum(axis=1), rows, rtol=1e-6)
    assert np.allclose(reg.F.sum(axis=0), cols, rtol=1e-6)


def _rec(x, y):
    return VolatilityRecord("z", x, y)


def test_volatility_correlation():
    assert volatility_correlation([_rec(1, 9), _rec(2, 8), _rec(3, 7)]) == pytest.approx(-1.0)
    with pytest.raises(ZeroVariance):
        volatility_correlation([_rec(1, 5), _rec(2, 5), _rec(3, 5)])
    with pytest.raises(ValidationError):
        volatility_correlation([_rec(1, 5), _rec(2, 4)])


def test_planted_correlation_recovered():
    rng = np.random.default_rng(42)
    n = 4000
    cov = [[1.0, -0.42], [-0.42, 1.0]]
    xy = rng.multivariate_normal([30, 20], cov, size=n)
    r = volatility_correlation([_rec(a, b) for a, b in xy])
    # the standard error of r is about (1 - 0.42^2) / sqrt(n) = 0.013
    assert r == pytest.approx(-0.42, abs=0.05)


def test_table1_layout(table1):
    votes = FlowTable.from_counts("REGION", table1.origin_labels, table1.destination_labels,
                                  1000 * table1.F)
    rows = table1_rows(votes)
    assert rows[0] == ["panel", "origin", *table1.destination_labels, "Total"]
    assert len(rows) == 1 + 2 * 5
    lega = next(r for r in rows if r[:2] == ["thousands", "Lega"])
    assert lega[2:] == ["0.7", "0.0", "0.5", "59.3", "22.0", "15.9", "98.4"]
    pct_lega = next(r for r in rows if r[:2] == ["percent", "Lega"])
    assert pct_lega[2:] == ["0.7", "0.0", "0.5", "60.3", "22.4", "16.2", "100.0"]


def test_write_volatility_csv(tmp_path, table1):
    p = tmp_path / "v.csv"
    write_volatility_csv([volatility_indexes(table1)], p)
    header = p.read_text().splitlines()[0]
    assert header.startswith("zone_id,party_switch_pct,to_abstention_pct,loyalty_M5S")
