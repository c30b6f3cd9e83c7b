import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.data_model import (
    OptionSet,
    PartyAggregation,
    StationRecord,
    ZoneTable,
    aggregate_parties,
    build_zones,
    largest_remainder,
    load_stations,
    reconcile_electorates,
    write_stations,
)
from flowcast.errors import (
    DuplicateStation,
    ElectorateExceeded,
    ElectorateMismatch,
    MinStations,
    MissingColumn,
    NegativeCount,
    NonIntegerCount,
    UnmappedLabel,
    ValidationError,
    ZeroElectorate,
)
from flowcast.synth_oracle import DESTINATIONS, SynthSpec, simulate

HEADER = "station_id,zone_id,electorate1,electorate2,A_e1,B_e1,No vote_e1,A_e2,B_e2,No vote_e2\n"


def _write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _station(sid, zid, c1, c2, o1=("A", "B"), o2=("A", "B")):
    return StationRecord(sid, zid, o1, o2, c1, c2, sum(c1), sum(c2))


def test_two_station_roundtrip(tmp_path):
    p = _write(tmp_path, HEADER + "s1,z,100,100,40,30,30,35,35,30\ns2,z,50,52,10,20,20,12,18,22\n")
    recs = load_stations(p)
    assert [r.station_id for r in recs] == ["s1", "s2"]
    assert recs[0].options1 == ("A", "B", "No vote")
    assert recs[0].counts1.tolist() == [40, 30, 30]
    assert recs[1].counts2.tolist() == [12, 18, 22]
    assert recs[1].electorate2 == 52


def test_negative_count_names_row_2(tmp_path):
    p = _write(tmp_path, HEADER + "s1,z,100,100,-3,30,30,35,35,30\n")
    with pytest.raises(NegativeCount, match="row 2"):
        load_stations(p)


@pytest.mark.parametrize("cell,err", [("2.5", NonIntegerCount), ("x", NonIntegerCount),
                                      ("", MissingColumn)])
def test_bad_counts(tmp_path, cell, err):
    p = _write(tmp_path, HEADER + f"s1,z,100,100,{cell},30,30,35,35,30\n")
    with pytest.raises(err):
        load_stations(p)


def test_integer_valued_float_accepted(tmp_path):
    p = _write(tmp_path, HEADER + "s1,z,100,100,40.0,30,30,35,35,30\n")
    assert load_stations(p)[0].counts1[0] == 40


def test_duplicate_station_names_row(tmp_path):
    p = _write(tmp_path, HEADER + "s1,z,100,100,40,30,30,35,35,30\ns1,z,100,100,40,30,30,35,35,30\n")
    with pytest.raises(DuplicateStation, match="row 3"):
        load_stations(p)


def test_missing_id_column(tmp_path):
    p = _write(tmp_path, "station_id,zone_id,electorate1,A_e1,B_e1,A_e2,B_e2\ns1,z,9,1,2,1,2\n")
    with pytest.raises(MissingColumn, match="electorate2"):
        load_stations(p)


def test_electorate_exceeded(tmp_path):
    p = _write(tmp_path, HEADER + "s1,z,10,100,40,30,30,35,35,30\n")
    with pytest.raises(ElectorateExceeded):
        load_stations(p)


def test_schema_renames_columns(tmp_path):
    text = "sez,area,e1,e2,A_e1,B_e1,A_e2,B_e2\ns1,z,10,10,4,6,5,5\n"
    p = _write(tmp_path, text)
    schema = {"columns": {"station_id": "sez", "zone_id": "area",
                          "electorate1": "e1", "electorate2": "e2"}}
    r = load_stations(p, schema)[0]
    assert (r.station_id, r.zone_id, r.electorate1) == ("s1", "z", 10)


def test_long_format_matches_wide(tmp_path):
    wide = _write(tmp_path, HEADER + "s1,z,100,100,40,30,30,35,35,30\n")
    long = _write(tmp_path, "station_id,zone_id,election,electorate,A,B,No vote\n"
                            "s1,z,1,100,40,30,30\ns1,z,2,100,35,35,30\n", "l.csv")
    assert load_stations(long, long=True)[0].same_as(load_stations(wide)[0])


def test_roundtrip_is_bit_identical(tmp_path):
    data = simulate(SynthSpec(seed=5, zones=3, stations_per_zone=5))
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_stations(data.records, a)
    recs = load_stations(a)
    write_stations(recs, b)
    assert a.read_bytes() == b.read_bytes()
    assert all(x.same_as(y) for x, y in zip(data.records, recs))


def test_bundled_file_has_19_zones_of_about_53():
    from importlib.resources import files
    path = files("flowcast") / "data" / "umbria_like" / "stations.csv"
    zones = build_zones(load_stations(path))
    assert len(zones) == 19
    assert np.mean([len(z) for z in zones]) == pytest.approx(53, abs=1)


def test_option_set_invariants():
    assert OptionSet(("a", "b")).reference == "b"
    for bad in [("a",), ("a", "a"), ("a", "")]:
        with pytest.raises(ValidationError):
            OptionSet(bad)


def test_aggregate_sums_merged_labels():
    r = StationRecord("s", "z", ("Lega", "FI", "OCR"), ("Lega", "FI", "OCR"),
                      [10, 5, 1], [10, 5, 1], 16, 16)
    m = {"Lega": "Lega-FI-OCR", "FI": "Lega-FI-OCR", "OCR": "Lega-FI-OCR"}
    out = aggregate_parties([r], PartyAggregation(m, m))[0]
    assert out.options1 == ("Lega-FI-OCR",)
    assert out.counts1.tolist() == [16]


def test_identity_aggregation():
    r = _station("s", "z", [1, 2], [2, 1])
    out = aggregate_parties([r], PartyAggregation.identity(r.options1, r.options2))[0]
    assert out.same_as(r)


def test_unmapped_label():
    r = _station("s", "z", [1, 2], [2, 1])
    with pytest.raises(UnmappedLabel):
        aggregate_parties([r], PartyAggregation({"A": "A"}, {"A": "A", "B": "B"}))


def test_synthetic_raw_parties_aggregate_to_table_columns():
    data = simulate(SynthSpec(seed=1, zones=3, stations_per_zone=3))
    assert len(data.records[0].options2) > len(DESTINATIONS)
    out = aggregate_parties(data.records, data.aggregation)
    assert out[0].options2 == DESTINATIONS
    for a, b in zip(data.records, out):
        assert a.total2 == b.total2


station_counts = st.lists(st.integers(0, 50), min_size=4, max_size=4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(station_counts, station_counts, st.sampled_from(["z1", "z2"])),
                min_size=1, max_size=8))
def test_aggregation_commutes_with_zone_sums(rows):
    labels = ("a", "b", "c", "d")
    recs = [StationRecord(f"s{k}", zid, labels, labels, c1, c2, sum(c1), sum(c2))
            for k, (c1, c2, zid) in enumerate(rows)]
    m = {"a": "ab", "b": "ab", "c": "c", "d": "d"}
    agg = aggregate_parties(recs, PartyAggregation(m, m))
    A = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    for zid in ("z1", "z2"):
        raw = [r for r in recs if r.zone_id == zid]
        if not raw:
            continue
        merged = [r for r in agg if r.zone_id == zid]
        zr = ZoneTable(zid, raw)
        zm = ZoneTable(zid, merged)
        assert np.array_equal(zr.margins1 @ A, zm.margins1)
        assert np.array_equal(zr.margins2 @ A, zm.margins2)


def test_zone_margins_are_station_sums():
    z = ZoneTable("z", [_station("1", "z", [1, 2], [3, 0]), _station("2", "z", [4, 5], [6, 3])])
    assert z.margins1.tolist() == [5, 7]
    assert z.margins2.tolist() == [9, 3]


def test_build_zones_min_stations_and_empty_drop():
    recs = [_station(str(k), "z", [1, 1], [1, 1]) for k in range(3)]
    recs.append(StationRecord("e", "z", ("A", "B"), ("A", "B"), [0, 0], [1, 1], 5, 5))
    assert len(build_zones(recs, min_stations=3)[0]) == 3
    with pytest.raises(MinStations):
        build_zones(recs, min_stations=4)


def _zone_with(c1, e1, e2):
    return ZoneTable("z", [StationRecord("s", "z", ("A", "B", "C")[:len(c1)],
                                         ("A", "B"), c1, [1, 1], e1, e2)])


def test_reconcile_unchanged_when_equal():
    z = _zone_with([60, 40], 100, 100)
    assert reconcile_electorates(z).stations[0].counts1.tolist() == [60, 40]


def test_reconcile_exact_proportional():
    z = _zone_with([60, 40], 100, 110)
    assert reconcile_electorates(z).stations[0].counts1.tolist() == [66, 44]


def _brute_min_deviation(x, total):
    """Smallest total absolute deviation over integer vectors near x with the given sum."""
    ranges = [range(int(np.floor(v)) - 1, int(np.ceil(v)) + 2) for v in x]
    best = None
    for cand in itertools.product(*ranges):
        if sum(cand) == total:
            d = float(np.abs(np.array(cand) - x).sum())
            best = d if best is None else min(best, d)
    return best


def test_reconcile_largest_remainder_minimizes_deviation():
    z = _zone_with([50, 30, 20], 100, 103)
    out = reconcile_electorates(z).stations[0].counts1
    assert out.sum() == 103
    x = np.array([50, 30, 20]) * 1.03
    assert np.abs(out - x).sum() == pytest.approx(_brute_min_deviation(x, 103))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 500), min_size=2, max_size=5))
def test_largest_remainder_is_optimal(vals):
    x = np.array(vals)
    total = int(round(x.sum()))
    if not np.floor(x).sum() <= total <= np.floor(x).sum() + len(x):
        return
    out = largest_remainder(x, total)
    assert out.sum() == total
    assert np.abs(out - x).max() < 1
    assert np.abs(out - x).sum() == pytest.approx(_brute_min_deviation(x, total), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 400), min_size=2, max_size=5), st.floats(0.8, 1.25))
def test_reconcile_preserves_proportions(c1, scale):
    e1 = max(sum(c1), 1)
    e2 = max(1, int(round(e1 * scale)))
    z = _zone_with(c1, e1, e2) if len(c1) <= 3 else None
    if z is None:
        return
    out = reconcile_electorates(z).stations[0].counts1
    exact = np.array(c1) * e2 / e1
    assert np.abs(out - exact).max() < 1


def test_reconcile_flags_large_change_and_reject_mode():
    z = _zone_with([60, 40], 100, 120)
    assert reconcile_electorates(z).warnings
    with pytest.raises(ElectorateMismatch):
        reconcile_electorates(z, mode="reject")


def test_reconcile_zero_electorate():
    z = ZoneTable("z", [StationRecord("s", "z", ("A", "B"), ("A", "B"), [0, 0], [0, 0], 0, 5)])
    with pytest.raises(ZeroElectorate):
        reconcile_electorates(z)
