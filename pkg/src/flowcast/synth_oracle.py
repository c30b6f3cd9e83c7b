"""Synthetic two-election data with known transition behaviour.

Each zone has its own true transition matrix.  Rows start from a base
matrix shaped like a regional table and are shifted on the log scale by
zone covariates (``effects``) and by planted local bumps (``outliers``)::

    p_zij  ∝  base_ij * exp(sum_v x_zv beta_ijv + bump_zij)

Inside a zone every origin voter of every station follows the same row, so
the homogeneity the estimator assumes holds exactly.  Stations differ only
in their first-election composition, drawn from a Dirichlet around the zone
shares.

Zone covariates are built from raw elementary variables through
:data:`DEFAULT_RECIPE`, the same recipe the pipeline applies, so the ``x``
that generated the data equals the ``x`` the models see.

Files written by :func:`generate`:

``stations.csv``
    wide station table (raw second-election parties, see ``split2``);
``covariates.csv``
    ``zone_id`` plus the raw elementary variables;
``aggregation.json``
    raw -> aggregated labels;
``truth.json``
    ``origins``, ``destinations``, ``zone_ids``, ``P`` (zone x I x J true
    rows), ``flows`` (zone x I x J realised transition counts after
    electorate reconciliation), ``covariates`` (the recipe output used),
    ``effects``, ``outliers``, ``reference`` (loyal destination per
    origin) and the generating SynthSpec.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .covariate_lab import CovariateMatrix, apply_recipe
from .data_model import NO_VOTE, PartyAggregation, StationRecord, largest_remainder, write_stations
from .errors import InvalidSpec, UnknownCell
from .volatility import loyalty_targets

ORIGINS = ("M5S", "PD", "FI", "Lega", NO_VOTE)
DESTINATIONS = ("M5S-OL", "PD", "OCL", "FdI", "Lega-FI-OCR", NO_VOTE)

# regional flows in thousands; rows ORIGINS, columns DESTINATIONS
REGIONAL_FLOWS = np.array([
    [50.2, 5.7, 3.6, 16.6, 16.1, 38.2],
    [5.6, 69.6, 9.9, 6.8, 3.9, 23.9],
    [0.2, 0.2, 9.1, 17.3, 22.5, 7.8],
    [0.7, 0.0, 0.5, 59.3, 22.0, 15.9],
    [11.0, 5.1, 6.0, 13.4, 7.7, 133.5],
])
MIN_BASE_P = 0.004

# aggregated second-election option -> raw parties and their fixed shares
DEFAULT_SPLIT2 = {
    "M5S-OL": (("M5S", 0.85), ("AVS", 0.15)),
    "OCL": (("Az-IV", 0.75), ("+Eu", 0.25)),
    "Lega-FI-OCR": (("Lega", 0.5), ("FI", 0.4), ("NM", 0.1)),
}

COVARIATES = ("geog", "recovery", "skill", "income", "unempl", "educ", "ksoc", "eutrust", "lefttrad")

# raw variable -> (mean, sd) of the elementary variables
RAW_SCALES = {
    "small_munic_pct": (60.0, 23.9),
    "distance_min": (33.1, 16.2),
    "low_income_pct": (42.6, 2.6),
    "wage_income_pc": (19.0, 0.9),
    "unemployment_rate": (5.6, 0.9),
    "income_variation_idx": (-1.0, 4.2),
    "low_income_change": (-3.2, 2.2),
    "low_education_pct": (45.3, 4.0),
    "vol_institutions": (0.6, 0.1),
    "volunteers": (11.9, 2.3),
    "vol_orgs": (0.8, 0.2),
    "referendum_turnout": (61.2, 2.8),
    "abstention_increase": (9.6, 5.4),
}

DEFAULT_RECIPE = (
    {"name": "geog", "op": "composite", "inputs": ["small_munic_pct", "distance_min"]},
    {"name": "recovery", "op": "composite", "inputs": ["income_variation_idx", "low_income_change"],
     "invert": [True, False]},
    {"name": "skill_raw", "op": "standardize", "input": "wage_income_pc", "invert": True},
    {"name": "skill", "op": "residualize", "input": "skill_raw", "on": "geog"},
    {"name": "income", "op": "residualize", "input": "low_income_pct", "on": "geog"},
    {"name": "unempl", "op": "standardize", "input": "unemployment_rate"},
    {"name": "educ", "op": "residualize", "input": "low_education_pct", "on": "geog"},
    {"name": "ksoc", "op": "composite",
     "inputs": ["vol_institutions", "volunteers", "vol_orgs", "referendum_turnout"],
     "invert": [True, True, True, True]},
    {"name": "eutrust", "op": "standardize", "input": "abstention_increase"},
    {"name": "lefttrad", "op": "dichotomize", "inputs": ["pci1987", "dc1987"], "ratio": 1.5},
)

# latent factors behind the raw variables
LATENT = ("geog", "recovery", "income0", "skill0", "educ0", "unempl", "ksoc", "eutrust", "tradition")
_LOADINGS = np.array([1.0, -0.75, 0.8, 0.8, 0.8, 0.25, 0.3, 0.2, -0.3])
_PARTIAL = {("income0", "skill0"): 0.35, ("income0", "educ0"): 0.35, ("skill0", "educ0"): 0.35,
            ("unempl", "income0"): 0.2, ("ksoc", "educ0"): 0.2, ("eutrust", "ksoc"): 0.2}


def default_latent_correlation():
    """Latent correlation: one geographic factor plus a few partial correlations.

    geog-recovery is -0.75 and geog loads 0.8 on the three variables that
    the recipe residualizes, whose residuals then correlate at 0.35.
    """
    n = len(LATENT)
    Q = np.eye(n)
    for (a, b), r in _PARTIAL.items():
        i, j = LATENT.index(a), LATENT.index(b)
        Q[i, j] = Q[j, i] = r
    d = np.sqrt(1.0 - _LOADINGS ** 2)
    C = np.outer(_LOADINGS, _LOADINGS) + np.outer(d, d) * Q
    np.fill_diagonal(C, 1.0)
    return C


DEFAULT_EFFECTS = (
    ("M5S", "FdI", "eutrust", 0.4),
    ("M5S", "FdI", "lefttrad", -0.35),
    ("M5S", NO_VOTE, "eutrust", 0.35),
    ("PD", "FdI", "ksoc", 0.3),
    ("PD", "FdI", "lefttrad", -0.4),
    ("PD", NO_VOTE, "lefttrad", -0.25),
    ("FI", "FdI", "recovery", 0.25),
    ("FI", "FdI", "educ", 0.3),
    ("FI", NO_VOTE, "educ", 0.4),
    ("Lega", "FdI", "recovery", 0.4),
    ("Lega", "FdI", "income", 0.45),
    ("Lega", NO_VOTE, "recovery", 0.35),
    ("Lega", NO_VOTE, "educ", -0.45),
    (NO_VOTE, "FdI", "geog", 0.5),
    (NO_VOTE, "FdI", "recovery", 0.4),
    (NO_VOTE, "FdI", "skill", 0.3),
    (NO_VOTE, "FdI", "ksoc", -0.4),
)


def default_base_P():
    """Row shares of the regional flows, empty cells lifted to ``MIN_BASE_P``."""
    P = REGIONAL_FLOWS / REGIONAL_FLOWS.sum(axis=1, keepdims=True)
    P = np.maximum(P, MIN_BASE_P)
    return P / P.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SynthSpec:
    """Everything that determines a synthetic dataset.

    ``true_P`` (I x J, or zones x I x J) overrides ``base_P``, ``effects``
    and ``outliers`` when given.  ``station_concentration`` is the Dirichlet
    concentration of station origin shares around the zone shares: smaller
    values give more varied stations.  ``heterogeneity_stress`` > 0 breaks
    within-zone homogeneity on purpose: a station's loyalty logit rises by
    that amount per standard deviation of the origin's local share.
    """

    seed: int = 0
    zones: int = 19
    stations_per_zone: int = 53
    voters_per_station: int = 700
    origins: tuple = ORIGINS
    destinations: tuple = DESTINATIONS
    base_P: tuple | None = None
    true_P: tuple | None = None
    effects: tuple = DEFAULT_EFFECTS
    outliers: tuple = ()
    covariate_correlation: tuple | None = None
    zone_concentration: float = 200.0
    station_concentration: float = 6.0
    electorate_drift: float = 0.02
    split2: dict | None = None
    heterogeneity_stress: float = 0.0

    def __post_init__(self):
        for name in ("base_P", "true_P", "covariate_correlation"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _freeze(np.asarray(v, dtype=float)))
        object.__setattr__(self, "origins", tuple(self.origins))
        object.__setattr__(self, "destinations", tuple(self.destinations))
        object.__setattr__(self, "effects", tuple(tuple(e) for e in self.effects))
        object.__setattr__(self, "outliers", tuple(tuple(o) for o in self.outliers))
        validate(self)

    @property
    def zone_ids(self):
        return tuple(str(z + 1) for z in range(self.zones))

    def base_matrix(self):
        if self.base_P is not None:
            return np.array(self.base_P)
        return default_base_P()

    def latent_correlation(self):
        if self.covariate_correlation is not None:
            return np.array(self.covariate_correlation)
        return default_latent_correlation()

    def splits(self):
        split = DEFAULT_SPLIT2 if self.split2 is None else self.split2
        return {k: tuple(tuple(p) for p in v) for k, v in split.items() if k in self.destinations}

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = _thaw(v)
        d["split2"] = {k: [list(p) for p in v] for k, v in self.splits().items()}
        return d


def _freeze(a):
    return tuple(_freeze(x) for x in a) if a.ndim else float(a)


def _thaw(v):
    return [_thaw(x) for x in v] if isinstance(v, tuple) else v


def validate(spec):
    I, J = len(spec.origins), len(spec.destinations)
    # residualized covariates need at least three zones
    if spec.zones < 3 or spec.stations_per_zone < 2 or spec.voters_per_station < 2:
        raise InvalidSpec("zones >= 3, stations_per_zone >= 2 and voters_per_station >= 2 required")
    if len(set(spec.origins)) != I or len(set(spec.destinations)) != J:
        raise InvalidSpec("option labels must be unique")
    if spec.station_concentration <= 0 or spec.zone_concentration <= 0:
        raise InvalidSpec("Dirichlet concentrations must be positive")
    if not 0 <= spec.electorate_drift < 0.5:
        raise InvalidSpec("electorate_drift must lie in [0, 0.5)")
    if spec.true_P is not None:
        P = np.array(spec.true_P)
        if P.shape not in ((I, J), (spec.zones, I, J)):
            raise InvalidSpec(f"true_P must be {I}x{J} or {spec.zones}x{I}x{J}")
        # explicit matrices may contain structural zeros (e.g. identity)
        if (P < 0).any() or (P > 1).any() or not np.allclose(P.sum(axis=-1), 1.0, atol=1e-9):
            raise InvalidSpec("true_P rows must be probability vectors")
    else:
        B = spec.base_matrix()
        if B.shape != (I, J):
            raise InvalidSpec(f"base_P must be {I}x{J}")
        if (B <= 0).any() or (B >= 1).any() or not np.allclose(B.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidSpec("base_P rows must be probability vectors with entries in (0, 1)")
    for e in spec.effects:
        if len(e) != 4:
            raise InvalidSpec(f"effect {e} must be (origin, destination, covariate, beta)")
        o, d, v, b = e
        if o not in spec.origins or d not in spec.destinations or v not in COVARIATES:
            raise InvalidSpec(f"effect {e} names an unknown origin, destination or covariate")
        if not np.isfinite(b):
            raise InvalidSpec(f"effect {e} is not finite")
    for out in spec.outliers:
        _check_cell(spec, *out)
    C = spec.latent_correlation()
    if C.shape != (len(LATENT), len(LATENT)) or not np.allclose(C, C.T) \
            or not np.allclose(np.diag(C), 1.0) or np.linalg.eigvalsh(C).min() <= 0:
        raise InvalidSpec(f"covariate_correlation must be a {len(LATENT)}x{len(LATENT)} "
                          "positive definite correlation matrix")
    for k, parts in spec.splits().items():
        if abs(sum(f for _, f in parts) - 1.0) > 1e-9 or any(f <= 0 for _, f in parts):
            raise InvalidSpec(f"split of {k!r} must be positive shares summing to 1")


def _check_cell(spec, zone, origin, destination, bump):
    if str(zone) not in spec.zone_ids:
        raise UnknownCell(f"no zone {zone!r}")
    if origin not in spec.origins:
        raise UnknownCell(f"no origin {origin!r}")
    if destination not in spec.destinations:
        raise UnknownCell(f"no destination {destination!r}")
    if not np.isfinite(bump):
        raise InvalidSpec("outlier bump must be finite")


def plant_outlier(spec, zone, origin, destination, bump):
    """Add ``bump`` to one zone's origin -> destination logit (the row is renormalised)."""
    _check_cell(spec, zone, origin, destination, bump)
    if bump == 0:
        return spec
    return replace(spec, outliers=spec.outliers + ((str(zone), origin, destination, float(bump)),))


def reference_destinations(spec):
    """Loyal destination of each origin (label equality or containment)."""
    targets = loyalty_targets(spec.origins, spec.destinations, "containment")
    return {o: spec.destinations[j] for o, j in targets.items()}


# -- covariates ----------------------------------------------------------------

def _paired(rng, factor, c2, n_items, signs):
    """Items whose standardized mean equals ``factor`` exactly in the population.

    The item noise is centred across items, so it cancels in the mean; ``c2``
    is each item's squared loading on the factor.
    """
    Z = factor.size
    e = rng.standard_normal((Z, n_items))
    e -= e.mean(axis=1, keepdims=True)
    e *= np.sqrt(n_items / (n_items - 1))
    items = np.sqrt(c2) * factor[:, None] + np.sqrt(1.0 - c2) * e
    return items * np.asarray(signs, dtype=float)[None, :]


def raw_covariates(spec, rng):
    """Raw elementary zone variables from correlated latent factors."""
    Z = spec.zones
    L = np.linalg.cholesky(spec.latent_correlation())
    F = rng.standard_normal((Z, len(LATENT))) @ L.T
    f = {name: F[:, k] for k, name in enumerate(LATENT)}
    z = {}
    # two geography items correlating at 0.55
    z["small_munic_pct"], z["distance_min"] = _paired(rng, f["geog"], 0.775, 2, [1, 1]).T
    # a high income-variation index means fast recovery, hence the sign flip
    z["income_variation_idx"], z["low_income_change"] = \
        _paired(rng, f["recovery"], 0.75, 2, [-1, 1]).T
    z["low_income_pct"] = f["income0"]
    z["wage_income_pc"] = -f["skill0"]
    z["low_education_pct"] = f["educ0"]
    z["unemployment_rate"] = f["unempl"]
    ks = _paired(rng, f["ksoc"], 0.7, 4, [-1, -1, -1, -1])
    for k, name in enumerate(("vol_institutions", "volunteers", "vol_orgs", "referendum_turnout")):
        z[name] = ks[:, k]
    z["abstention_increase"] = f["eutrust"]
    cols = {name: RAW_SCALES[name][0] + RAW_SCALES[name][1] * z[name] for name in RAW_SCALES}
    # 1987 votes: the left/centre ratio crosses 1.5 at tradition = 0
    total = rng.integers(3000, 40000, size=Z).astype(float)
    ratio = 1.5 * np.exp(0.7 * f["tradition"])
    cols["dc1987"] = np.round(0.8 * total / (1.0 + ratio))
    cols["pci1987"] = np.round(0.8 * total * ratio / (1.0 + ratio))
    cols["dc1987"] = np.maximum(cols["dc1987"], 1.0)
    return CovariateMatrix(spec.zone_ids, cols, {n: {"op": "raw"} for n in cols})


def implied_correlations(spec=None):
    """Population correlations of the continuous recipe outputs implied by the latent model.

    Returns ``(names, R)``.  The residualized columns are partial
    correlations given geog; composites equal their factor exactly.
    """
    C = (spec or SynthSpec()).latent_correlation()
    names = ("geog", "recovery", "skill", "income", "unempl", "educ", "ksoc", "eutrust")
    g = LATENT.index("geog")
    A = np.zeros((len(names), len(LATENT)))
    for r, n in enumerate(names):
        src = {"skill": "skill0", "income": "income0", "educ": "educ0"}.get(n, n)
        k = LATENT.index(src)
        A[r, k] = 1.0
        if src != n:
            A[r, g] = -C[k, g]
    S = A @ C @ A.T
    d = np.sqrt(np.diag(S))
    return names, S / np.outer(d, d)


# -- transitions ---------------------------------------------------------------

def transition_matrices(spec, X):
    """True zone rows, shape (zones, I, J), for covariates ``X`` (zones x COVARIATES)."""
    I, J = len(spec.origins), len(spec.destinations)
    Z = spec.zones
    if spec.true_P is not None:
        P = np.array(spec.true_P)
        return np.broadcast_to(P, (Z, I, J)).copy()
    X = np.asarray(X, dtype=float)
    logp = np.broadcast_to(np.log(spec.base_matrix()), (Z, I, J)).copy()
    for o, d, v, b in spec.effects:
        logp[:, spec.origins.index(o), spec.destinations.index(d)] += b * X[:, COVARIATES.index(v)]
    for zone, o, d, b in spec.outliers:
        logp[spec.zone_ids.index(str(zone)), spec.origins.index(o), spec.destinations.index(d)] += b
    logp -= logp.max(axis=2, keepdims=True)
    P = np.exp(logp)
    return P / P.sum(axis=2, keepdims=True)


@dataclass
class SynthData:
    records: list
    raw_covariates: CovariateMatrix
    covariates: CovariateMatrix
    aggregation: PartyAggregation
    truth: dict = field(default_factory=dict)


def _zone_stations(spec, zid, P, zone_shares, rng):
    I = len(spec.origins)
    S = spec.stations_per_zone
    v = spec.voters_per_station
    lo, hi = max(1, v // 2), v + v // 2
    electorate1 = rng.integers(lo, hi + 1, size=S)
    shares = rng.dirichlet(spec.station_concentration * zone_shares, size=S)
    counts1 = np.array([rng.multinomial(n, p) for n, p in zip(electorate1, shares)])
    if spec.electorate_drift > 0:
        drift = np.clip(rng.normal(0.0, spec.electorate_drift, size=S), -0.25, 0.25)
        electorate2 = np.maximum(1, np.round(electorate1 * (1.0 + drift))).astype(np.int64)
    else:
        electorate2 = electorate1.copy()
    loyal = reference_destinations(spec)
    share_sd = shares.std(axis=0)
    flows = np.zeros((I, len(spec.destinations)))
    counts2 = []
    for s in range(S):
        ratio = electorate2[s] / electorate1[s]
        n1 = counts1[s] if ratio == 1 else \
            largest_remainder(counts1[s] * ratio, int(round(counts1[s].sum() * ratio)))
        Ps = P
        if spec.heterogeneity_stress:
            Ps = P.copy()
            for i, o in enumerate(spec.origins):
                if o in loyal and share_sd[i] > 0:
                    j = spec.destinations.index(loyal[o])
                    bump = spec.heterogeneity_stress * (shares[s, i] - zone_shares[i]) / share_sd[i]
                    Ps[i, j] *= np.exp(bump)
            Ps /= Ps.sum(axis=1, keepdims=True)
        f = rng.multinomial(n1, Ps)
        flows += f
        counts2.append(f.sum(axis=0))
    return electorate1, electorate2, counts1, np.array(counts2), flows


def _split_destinations(spec, counts2, rng):
    """Raw second-election labels and counts (aggregates split multinomially)."""
    splits = spec.splits()
    labels, cols = [], []
    for j, d in enumerate(spec.destinations):
        if d in splits:
            parts = splits[d]
            drawn = rng.multinomial(counts2[:, j], [f for _, f in parts])
            for k, (name, _) in enumerate(parts):
                labels.append(name)
                cols.append(drawn[:, k])
        else:
            labels.append(d)
            cols.append(counts2[:, j])
    return labels, np.column_stack(cols)


def _aggregation(spec, raw_labels2):
    owner = {name: d for d, parts in spec.splits().items() for name, _ in parts}
    e2 = {lab: owner.get(lab, lab) for lab in raw_labels2}
    return PartyAggregation({o: o for o in spec.origins}, e2)


def simulate(spec):
    """Draw a dataset in memory; see :func:`generate` for the file form."""
    root = np.random.SeedSequence(spec.seed)
    cov_seq, *zone_seqs = root.spawn(spec.zones + 1)
    rng_cov = np.random.default_rng(cov_seq)
    raw = raw_covariates(spec, rng_cov)
    X = apply_recipe(raw, DEFAULT_RECIPE, keep=COVARIATES)
    P = transition_matrices(spec, X.matrix())
    flows_base = REGIONAL_FLOWS.sum(axis=1)
    if len(spec.origins) == len(flows_base):
        base_shares = flows_base / flows_base.sum()
    else:
        base_shares = np.full(len(spec.origins), 1.0 / len(spec.origins))

    records, flows, labels2 = [], [], None
    for z, zid in enumerate(spec.zone_ids):
        rng = np.random.default_rng(zone_seqs[z])
        zone_shares = rng.dirichlet(spec.zone_concentration * base_shares)
        e1, e2, c1, c2, fl = _zone_stations(spec, zid, P[z], zone_shares, rng)
        labels2, raw2 = _split_destinations(spec, c2, rng)
        flows.append(fl)
        for s in range(spec.stations_per_zone):
            records.append(StationRecord(f"{zid}-{s + 1:03d}", zid, spec.origins, tuple(labels2),
                                         c1[s], raw2[s], int(e1[s]), int(e2[s])))
    agg = _aggregation(spec, labels2)
    truth = {
        "seed": spec.seed,
        "origins": list(spec.origins),
        "destinations": list(spec.destinations),
        "zone_ids": list(spec.zone_ids),
        "P": P.tolist(),
        "flows": np.array(flows).tolist(),
        "covariates": {n: X.columns[n].tolist() for n in X.names},
        "effects": [list(e) for e in spec.effects],
        "outliers": [list(o) for o in spec.outliers],
        "reference": reference_destinations(spec),
        "spec": spec.to_dict(),
    }
    return SynthData(records, raw, X, agg, truth)


def generate(spec, out_dir):
    """Write stations.csv, covariates.csv, aggregation.json and truth.json.

    Returns a dict of the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = simulate(spec)
    paths = {
        "stations": out / "stations.csv",
        "covariates": out / "covariates.csv",
        "aggregation": out / "aggregation.json",
        "truth": out / "truth.json",
    }
    write_stations(data.records, paths["stations"])
    data.raw_covariates.to_csv(paths["covariates"])
    data.aggregation.to_json(paths["aggregation"])
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(data.truth, fh, indent=1)
        fh.write("\n")
    return paths


def load_truth(path):
    with open(path, encoding="utf-8") as fh:
        t = json.load(fh)
    t["P"] = np.array(t["P"])
    t["flows"] = np.array(t["flows"])
    return t
