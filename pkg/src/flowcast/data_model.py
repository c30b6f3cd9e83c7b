"""Station-level election data: types, CSV ingestion, party and zone aggregation.

The canonical file is *wide*: one row per polling station, with the votes of
both elections side by side::

    station_id,zone_id,electorate1,electorate2,M5S_e1,...,No vote_e1,M5S_e2,...

Option columns are recognised by their ``_e1`` / ``_e2`` suffix unless an
explicit schema lists them.  A *long* variant (one row per station per
election, with an ``election`` column) is accepted with ``long=True``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import (
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

logger = logging.getLogger(__name__)

NO_VOTE = "No vote"
DEFAULT_MIN_STATIONS = 10
RECONCILE_MODES = ("proportional-scale", "reject")
_ID_COLUMNS = ("station_id", "zone_id", "electorate1", "electorate2")


@dataclass(frozen=True)
class OptionSet:
    """Ordered voting options of one election.

    ``reference_index`` defaults to the last option.
    """

    labels: tuple
    reference_index: int = -1

    def __post_init__(self):
        labels = tuple(str(lab) for lab in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValidationError(f"an option set needs at least 2 labels, got {labels}")
        if any(not lab for lab in labels):
            raise ValidationError("option labels must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"option labels are not unique: {labels}")
        ref = self.reference_index
        if not -len(labels) <= ref < len(labels):
            raise ValidationError(f"reference_index {ref} out of range")
        object.__setattr__(self, "reference_index", ref % len(labels))

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown option {label!r}; known: {list(self.labels)}") from None

    @property
    def reference(self):
        return self.labels[self.reference_index]


@dataclass(frozen=True)
class PartyAggregation:
    """Raw label -> aggregated label, one mapping per election."""

    election1: Mapping[str, str]
    election2: Mapping[str, str]

    @classmethod
    def identity(cls, labels1, labels2):
        return cls({lab: lab for lab in labels1}, {lab: lab for lab in labels2})

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = set(doc) - {"election1", "election2"}
        if unknown or not {"election1", "election2"} <= set(doc):
            raise ValidationError(
                f"{path}: aggregation file needs exactly 'election1' and 'election2' keys"
            )
        return cls(dict(doc["election1"]), dict(doc["election2"]))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"election1": dict(self.election1), "election2": dict(self.election2)},
                      fh, indent=2, ensure_ascii=False)
            fh.write("\n")

    @staticmethod
    def target_labels(mapping):
        """Aggregated labels in order of first appearance in ``mapping``."""
        return tuple(dict.fromkeys(mapping.values()))


@dataclass(frozen=True, eq=False)
class StationRecord:
    """Vote counts of one polling station in both elections."""

    station_id: str
    zone_id: str
    options1: tuple
    options2: tuple
    counts1: np.ndarray
    counts2: np.ndarray
    electorate1: int
    electorate2: int

    def __post_init__(self):
        for name in ("counts1", "counts2"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.counts1.shape != (len(self.options1),) or self.counts2.shape != (len(self.options2),):
            raise ValidationError(f"station {self.station_id}: counts do not match option labels")
        if (self.counts1 < 0).any() or (self.counts2 < 0).any():
            raise NegativeCount(f"station {self.station_id} has a negative count")

    @property
    def total1(self):
        return int(self.counts1.sum())

    @property
    def total2(self):
        return int(self.counts2.sum())

    def same_as(self, other):
        """Exact equality of every field."""
        return (
            self.station_id == other.station_id
            and self.zone_id == other.zone_id
            and self.options1 == other.options1
            and self.options2 == other.options2
            and np.array_equal(self.counts1, other.counts1)
            and np.array_equal(self.counts2, other.counts2)
            and self.electorate1 == other.electorate1
            and self.electorate2 == other.electorate2
        )


@dataclass(frozen=True, eq=False)
class ZoneTable:
    """The stations of one zone.  Margins are recomputed from the stations."""

    zone_id: str
    stations: tuple
    warnings: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        if not self.stations:
            raise MinStations(f"zone {self.zone_id} has no stations")
        first = self.stations[0]
        for s in self.stations:
            if s.zone_id != self.zone_id:
                raise ValidationError(f"station {s.station_id} is not in zone {self.zone_id}")
            if s.options1 != first.options1 or s.options2 != first.options2:
                raise ValidationError(f"zone {self.zone_id}: stations disagree on option labels")

    @property
    def options1(self):
        return self.stations[0].options1

    @property
    def options2(self):
        return self.stations[0].options2

    @property
    def origin_counts(self):
        """Stations x origin-options matrix."""
        return np.array([s.counts1 for s in self.stations], dtype=np.int64)

    @property
    def destination_counts(self):
        """Stations x destination-options matrix."""
        return np.array([s.counts2 for s in self.stations], dtype=np.int64)

    @property
    def margins1(self):
        return self.origin_counts.sum(axis=0)

    @property
    def margins2(self):
        return self.destination_counts.sum(axis=0)

    def __len__(self):
        return len(self.stations)


# -- ingestion ---------------------------------------------------------------

def _parse_count(text, row, column):
    text = (text or "").strip()
    if text == "":
        raise MissingColumn(f"empty value in column {column!r}", row=row)
    try:
        value = int(text)
    except ValueError:
        try:
            fvalue = float(text)
        except ValueError:
            raise NonIntegerCount(f"column {column!r}: {text!r} is not a count", row=row) from None
        if not np.isfinite(fvalue) or fvalue != int(fvalue):
            raise NonIntegerCount(f"column {column!r}: {text!r} is not an integer", row=row)
        value = int(fvalue)
    if value < 0:
        raise NegativeCount(f"column {column!r} has negative count {value}", row=row)
    return value


def _option_columns(header, schema):
    suffix1 = schema.get("suffix1", "_e1")
    suffix2 = schema.get("suffix2", "_e2")
    if "options1" in schema:
        opts1 = tuple(schema["options1"])
    else:
        opts1 = tuple(h[: -len(suffix1)] for h in header if h.endswith(suffix1))
    if "options2" in schema:
        opts2 = tuple(schema["options2"])
    else:
        opts2 = tuple(h[: -len(suffix2)] for h in header if h.endswith(suffix2))
    cols1 = [o + suffix1 for o in opts1]
    cols2 = [o + suffix2 for o in opts2]
    for col in cols1 + cols2:
        if col not in header:
            raise MissingColumn(f"header lacks option column {col!r}", row=1)
    if len(opts1) < 2 or len(opts2) < 2:
        raise MissingColumn("need at least two option columns per election", row=1)
    return opts1, opts2, cols1, cols2


def _check_electorate(total, electorate, station, row):
    if total > electorate:
        raise ElectorateExceeded(
            f"station {station}: {total} votes exceed electorate {electorate}", row=row
        )


def load_stations(path, schema=None, long=False):
    """Read and validate a station file.

    Parameters
    ----------
    path : str or Path
        CSV file (UTF-8, comma separated).
    schema : dict, optional
        ``columns`` renames the id columns (canonical name -> header name);
        ``options1`` / ``options2`` list the option labels explicitly;
        ``suffix1`` / ``suffix2`` override the ``_e1`` / ``_e2`` suffixes.
    long : bool
        Read the long layout (``station_id,zone_id,election,electorate,<options>``).

    Returns
    -------
    list of StationRecord
        In file order.
    """
    schema = dict(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("file is empty", row=1) from None
        rows = list(reader)
    header = [h.strip() for h in header]
    if long:
        return _load_long(header, rows, schema)

    rename = schema.get("columns", {})
    id_idx = {}
    for name in _ID_COLUMNS:
        col = rename.get(name, name)
        if col not in header:
            raise MissingColumn(f"header lacks column {col!r}", row=1)
        id_idx[name] = header.index(col)
    opts1, opts2, cols1, cols2 = _option_columns(header, schema)
    idx1 = [header.index(c) for c in cols1]
    idx2 = [header.index(c) for c in cols2]

    records = []
    seen = {}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise MissingColumn(f"expected {len(header)} fields, found {len(row)}", row=lineno)
        sid = row[id_idx["station_id"]].strip()
        if sid in seen:
            raise DuplicateStation(f"station {sid!r} already defined on row {seen[sid]}", row=lineno)
        seen[sid] = lineno
        e1 = _parse_count(row[id_idx["electorate1"]], lineno, "electorate1")
        e2 = _parse_count(row[id_idx["electorate2"]], lineno, "electorate2")
        c1 = [_parse_count(row[i], lineno, header[i]) for i in idx1]
        c2 = [_parse_count(row[i], lineno, header[i]) for i in idx2]
        _check_electorate(sum(c1), e1, sid, lineno)
        _check_electorate(sum(c2), e2, sid, lineno)
        records.append(StationRecord(sid, row[id_idx["zone_id"]].strip(), opts1, opts2,
                                     c1, c2, e1, e2))
    return records


def _load_long(header, rows, schema):
    rename = schema.get("columns", {})
    idx = {}
    for name in ("station_id", "zone_id", "election", "electorate"):
        col = rename.get(name, name)
        if col not in header:
            raise MissingColumn(f"header lacks column {col!r}", row=1)
        idx[name] = header.index(col)
    option_cols = [i for i in range(len(header)) if i not in idx.values()]

    parsed = {}
    order = []
    used = {"1": set(), "2": set()}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise MissingColumn(f"expected {len(header)} fields, found {len(row)}", row=lineno)
        sid = row[idx["station_id"]].strip()
        election = row[idx["election"]].strip()
        if election not in ("1", "2"):
            raise MissingColumn(f"election must be 1 or 2, got {election!r}", row=lineno)
        key = (sid, election)
        if key in parsed:
            raise DuplicateStation(f"station {sid!r} election {election} repeated", row=lineno)
        if sid not in {k[0] for k in order}:
            order.append((sid, lineno))
        values = {}
        for i in option_cols:
            if row[i].strip():
                values[header[i]] = _parse_count(row[i], lineno, header[i])
                used[election].add(header[i])
        electorate = _parse_count(row[idx["electorate"]], lineno, "electorate")
        parsed[key] = (row[idx["zone_id"]].strip(), electorate, values, lineno)

    opts = {}
    for e in ("1", "2"):
        listed = schema.get(f"options{e}")
        opts[e] = tuple(listed) if listed else tuple(header[i] for i in option_cols if header[i] in used[e])

    records = []
    for sid, lineno in order:
        for e in ("1", "2"):
            if (sid, e) not in parsed:
                raise MissingColumn(f"station {sid!r} lacks election {e}", row=lineno)
        z1, e1, v1, l1 = parsed[(sid, "1")]
        z2, e2, v2, l2 = parsed[(sid, "2")]
        if z1 != z2:
            raise ValidationError(f"row {l2}: station {sid!r} changes zone between elections")
        c1 = [v1.get(o, 0) for o in opts["1"]]
        c2 = [v2.get(o, 0) for o in opts["2"]]
        _check_electorate(sum(c1), e1, sid, l1)
        _check_electorate(sum(c2), e2, sid, l2)
        records.append(StationRecord(sid, z1, opts["1"], opts["2"], c1, c2, e1, e2))
    return records


def write_stations(records, path):
    """Write records in the canonical wide layout."""
    records = list(records)
    if not records:
        raise ValidationError("nothing to write")
    opts1, opts2 = records[0].options1, records[0].options2
    header = list(_ID_COLUMNS) + [o + "_e1" for o in opts1] + [o + "_e2" for o in opts2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in records:
            if r.options1 != opts1 or r.options2 != opts2:
                raise ValidationError(f"station {r.station_id}: inconsistent option labels")
            writer.writerow([r.station_id, r.zone_id, r.electorate1, r.electorate2,
                             *r.counts1.tolist(), *r.counts2.tolist()])


# -- aggregation -------------------------------------------------------------

def _aggregation_matrix(labels, mapping, election):
    missing = [lab for lab in labels if lab not in mapping]
    if missing:
        raise UnmappedLabel(f"election {election}: no aggregation for {missing}")
    targets = tuple(lab for lab in PartyAggregation.target_labels(mapping)
                    if any(mapping[raw] == lab for raw in labels))
    A = np.zeros((len(labels), len(targets)), dtype=np.int64)
    for i, lab in enumerate(labels):
        A[i, targets.index(mapping[lab])] = 1
    return targets, A


def aggregate_parties(records, agg):
    """Merge raw party labels into aggregated options.

    The output option order is the order in which aggregated labels first
    appear among the mapping's values.
    """
    records = list(records)
    if not records:
        return []
    cache = {}
    out = []
    for r in records:
        key = (r.options1, r.options2)
        if key not in cache:
            cache[key] = (_aggregation_matrix(r.options1, agg.election1, 1),
                          _aggregation_matrix(r.options2, agg.election2, 2))
        (t1, A1), (t2, A2) = cache[key]
        out.append(replace(r, options1=t1, options2=t2,
                           counts1=r.counts1 @ A1, counts2=r.counts2 @ A2))
    return out


def build_zones(records, min_stations=DEFAULT_MIN_STATIONS, drop_empty=True):
    """Group records into zones, in order of first appearance.

    Stations with no votes in either election carry no information and are
    dropped with a warning.  Raises :class:`MinStations` when a zone ends up
    with fewer than ``min_stations`` stations.
    """
    groups = {}
    for r in records:
        if drop_empty and (r.total1 == 0 or r.total2 == 0):
            logger.warning("dropping station %s (zone %s): zero total votes", r.station_id, r.zone_id)
            continue
        groups.setdefault(r.zone_id, []).append(r)
    zones = []
    for zid, stations in groups.items():
        if len(stations) < min_stations:
            raise MinStations(
                f"zone {zid} has {len(stations)} usable station(s); at least {min_stations} required"
            )
        zones.append(ZoneTable(zid, tuple(stations)))
    return zones


def largest_remainder(values, total):
    """Round non-negative reals to integers summing to ``total``.

    Floors every value and hands the missing units to the largest fractional
    parts (ties go to the lower index).
    """
    values = np.asarray(values, dtype=float)
    base = np.floor(values).astype(np.int64)
    short = int(total) - int(base.sum())
    if short < 0 or short > len(values):
        raise ValidationError(f"cannot round {values.tolist()} to total {total}")
    if short:
        frac = values - base
        order = np.lexsort((np.arange(len(values)), -frac))
        base[order[:short]] += 1
    return base


def reconcile_electorates(z, mode="proportional-scale", flag_threshold=0.10):
    """Bring election-1 counts onto the election-2 electorate.

    In ``proportional-scale`` mode each station's ``counts1`` is multiplied by
    ``electorate2 / electorate1`` and rounded by largest remainder.  Stations
    whose electorates differ by more than ``flag_threshold`` are listed in the
    returned zone's ``warnings``.  ``reject`` mode raises on any difference.
    """
    if mode not in RECONCILE_MODES:
        raise ValidationError(f"unknown reconcile mode {mode!r}")
    stations = []
    flags = list(z.warnings)
    for s in z.stations:
        if s.electorate1 == 0 or s.electorate2 == 0:
            raise ZeroElectorate(f"station {s.station_id} (zone {z.zone_id}) has zero electorate")
        if s.electorate1 == s.electorate2:
            stations.append(s)
            continue
        if mode == "reject":
            raise ElectorateMismatch(
                f"station {s.station_id}: electorate {s.electorate1} -> {s.electorate2}"
            )
        ratio = s.electorate2 / s.electorate1
        if abs(ratio - 1.0) > flag_threshold:
            msg = f"station {s.station_id}: electorate changed by {100 * (ratio - 1):+.1f}%"
            logger.warning("zone %s: %s", z.zone_id, msg)
            flags.append(msg)
        target = int(round(s.total1 * ratio))
        scaled = largest_remainder(s.counts1 * ratio, target)
        stations.append(replace(s, counts1=scaled))
    return ZoneTable(z.zone_id, tuple(stations), tuple(flags))

