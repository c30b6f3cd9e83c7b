"""Row percentages, volatility indexes and regional aggregation of flow tables.

Loyalty needs a rule when origin and destination option sets differ (a
first-election party can sit inside an aggregated second-election option).
Three rules are available:

``None`` (default)
    the positional diagonal: origin ``i`` is loyal to destination ``i``;
``"containment"``
    origin ``o`` is loyal to the destination whose label equals ``o`` or
    contains it as a ``-`` separated token (``FI`` -> ``Lega-FI-OCR``);
a dict
    explicit origin -> destination labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .ei_estimator import REGION, FlowTable
from .errors import MissingAbstention, OptionMismatch, ValidationError, ZeroRowTotal, ZeroVariance

NO_VOTE = "No vote"
MINOR_CATEGORY_NOTE = (
    "published regional figures also count minor origin categories that are "
    "absent from this table, so they differ from these indexes"
)


@dataclass(frozen=True)
class VolatilityRecord:
    zone_id: str
    party_switch_pct: float
    to_abstention_pct: float
    loyalty_pct: dict = field(default_factory=dict)
    loyalty_rule: str = "positional"
    notes: tuple = ()


def row_percentages(F):
    """100 * F_ij / row total, unrounded."""
    M = F.F if isinstance(F, FlowTable) else np.asarray(F, dtype=float)
    totals = M.sum(axis=1)
    if (totals <= 0).any():
        raise ZeroRowTotal(f"rows {np.flatnonzero(totals <= 0).tolist()} have zero total")
    return 100.0 * M / totals[:, None]


def display_round(x, decimals=1):
    """Round half away from zero, as printed tables do (numpy rounds half to even)."""
    x = np.asarray(x, dtype=float)
    scale = 10.0 ** decimals
    # the 1e-9 nudge absorbs binary representation error of values like 0.35
    return np.sign(x) * np.floor(np.abs(x) * scale + 0.5 + 1e-9) / scale


def loyalty_targets(origins, destinations, loyalty=None):
    """Origin label -> loyal destination index (origins without a match are omitted)."""
    origins, destinations = tuple(origins), tuple(destinations)
    out = {}
    if loyalty is None:
        for i, o in enumerate(origins):
            if i < len(destinations):
                out[o] = i
    elif loyalty == "containment":
        for o in origins:
            for j, d in enumerate(destinations):
                if d == o or o in d.split("-"):
                    out[o] = j
                    break
    elif isinstance(loyalty, dict):
        for o, d in loyalty.items():
            if o not in origins:
                raise ValidationError(f"loyalty map names unknown origin {o!r}")
            if d not in destinations:
                raise ValidationError(f"loyalty map names unknown destination {d!r}")
            out[o] = destinations.index(d)
    else:
        raise ValidationError(f"unknown loyalty rule {loyalty!r}")
    return out


def _rule_name(loyalty):
    if loyalty is None:
        return "positional"
    return loyalty if isinstance(loyalty, str) else "explicit"


def volatility_indexes(F, abstention_label=NO_VOTE, loyalty=None, notes=()):
    """Between-party and toward-abstention volatility of a flow table.

    Both percentages are relative to the first-election party votes, i.e.
    all origins except ``abstention_label``.
    """
    origins, dests = F.origin_labels, F.destination_labels
    if abstention_label not in origins or abstention_label not in dests:
        raise MissingAbstention(f"{abstention_label!r} must be both an origin and a destination")
    a_row = origins.index(abstention_label)
    a_col = dests.index(abstention_label)
    targets = loyalty_targets(origins, dests, loyalty)
    targets[abstention_label] = a_col
    M = F.F
    party_rows = [i for i in range(len(origins)) if i != a_row]
    party_total = M[party_rows].sum()
    if party_total <= 0:
        raise ZeroRowTotal("no first-election party votes")
    to_abst = M[party_rows, a_col].sum()
    loyal = sum(M[i, targets[origins[i]]] for i in party_rows
                if origins[i] in targets and targets[origins[i]] != a_col)
    switch = party_total - to_abst - loyal
    loyalty_pct = {}
    for i, o in enumerate(origins):
        if o in targets and M[i].sum() > 0:
            loyalty_pct[o] = float(100.0 * M[i, targets[o]] / M[i].sum())
    rule = _rule_name(loyalty)
    notes = tuple(notes)
    if rule == "containment":
        nested = [f"{o}->{dests[j]}" for o, j in targets.items()
                  if dests[j] != o and o != abstention_label]
        if nested:
            notes += (f"loyalty counted into aggregated destinations: {', '.join(nested)}",)
    return VolatilityRecord(F.zone_id, float(100.0 * switch / party_total),
                            float(100.0 * to_abst / party_total), loyalty_pct, rule, notes)


def aggregate_region(tables, zone_id=REGION):
    """Element-wise sum of zone flow tables with identical option sets."""
    tables = list(tables)
    if not tables:
        raise ValidationError("no flow tables to aggregate")
    o, d = tables[0].origin_labels, tables[0].destination_labels
    for t in tables[1:]:
        if t.origin_labels != o or t.destination_labels != d:
            raise OptionMismatch(f"flow table {t.zone_id} has different options")
    F = sum(t.F for t in tables)
    rows = sum(t.row_margins for t in tables)
    cols = sum(t.col_margins for t in tables)
    se = None
    if all(t.se is not None for t in tables):
        # zone estimates are independent
        se = np.sqrt(sum(t.se ** 2 for t in tables))
    return FlowTable(zone_id, o, d, F, rows, cols, se)


def volatility_correlation(records):
    """Pearson r between party switching and switching to abstention across zones."""
    records = list(records)
    if len(records) < 3:
        raise ValidationError("volatility correlation needs at least 3 zones")
    x = np.array([r.party_switch_pct for r in records])
    y = np.array([r.to_abstention_pct for r in records])
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ZeroVariance("a volatility measure is constant across zones")
    return float(np.corrcoef(x, y)[0, 1])


def write_volatility_csv(records, path):
    """One row per record; loyalty columns follow the union of origins, first seen."""
    records = list(records)
    parties = list(dict.fromkeys(o for r in records for o in r.loyalty_pct))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zone_id", "party_switch_pct", "to_abstention_pct",
                    *(f"loyalty_{p}" for p in parties)])
        for r in records:
            w.writerow([r.zone_id, f"{r.party_switch_pct:.6f}", f"{r.to_abstention_pct:.6f}",
                        *(f"{r.loyalty_pct[p]:.6f}" if p in r.loyalty_pct else "" for p in parties)])
