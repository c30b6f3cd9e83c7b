"""Zone-level covariates: standardisation, composites, residualisation, coding.

Transforms are applied in recipe order.  Every column of a
:class:`CovariateMatrix` keeps a provenance record describing how it was made,
so the design matrix can be rebuilt and audited.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    PerfectCollinearity,
    UnknownZone,
    ValidationError,
    ZeroDenominator,
    ZeroVariance,
)

DEFAULT_CORRELATION_FLAG = 0.7


def standardize(x, invert=False):
    """Zero mean, unit population variance; negated when ``invert`` is set."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("standardize needs a vector of length >= 2")
    if not np.all(np.isfinite(x)):
        raise ValidationError("standardize got non-finite values")
    centred = x - x.mean()
    sd = np.sqrt(np.mean(centred ** 2))
    if sd <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ZeroVariance("cannot standardize a constant vector")
    z = centred / sd
    return -z if invert else z


def composite(xs, invert_flags=None):
    """Average of standardized components, re-standardized."""
    xs = [np.asarray(x, dtype=float) for x in xs]
    if not xs:
        raise ValidationError("composite needs at least one component")
    if invert_flags is None:
        invert_flags = [False] * len(xs)
    if len(invert_flags) != len(xs):
        raise ValidationError("one invert flag per component")
    if len({x.shape for x in xs}) != 1:
        raise ValidationError("composite components must have equal lengths")
    parts = [standardize(x, inv) for x, inv in zip(xs, invert_flags)]
    return standardize(np.mean(parts, axis=0))


def residualize(y, on):
    """Least-squares residual of ``y`` on ``on`` (with intercept), re-standardized."""
    y = np.asarray(y, dtype=float)
    on = np.asarray(on, dtype=float)
    if y.shape != on.shape:
        raise ValidationError("residualize needs equal-length vectors")
    oc = on - on.mean()
    yc = y - y.mean()
    ss = oc @ oc
    if ss <= 0:
        raise ZeroVariance("conditioning column is constant")
    resid = yc - (oc @ yc / ss) * oc
    # drop the last rounding trace of the conditioning column
    resid -= (oc @ resid / ss) * oc
    if np.sqrt(np.mean(resid ** 2)) <= 1e-10 * max(1.0, np.sqrt(np.mean(yc ** 2))):
        raise PerfectCollinearity("column is an affine function of the conditioning column")
    return standardize(resid)


def dichotomize_tradition(votes_a, votes_b, ratio=1.5):
    """1 where ``votes_a`` exceeds ``ratio`` times ``votes_b``, else 0."""
    a = np.asarray(votes_a, dtype=float)
    b = np.asarray(votes_b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("vote vectors differ in length")
    if (b <= 0).any():
        raise ZeroDenominator("comparison votes must be positive")
    return (a > ratio * b).astype(float)


def correlation(x, y):
    x = np.asarray(x, dtype=float) - np.mean(x)
    y = np.asarray(y, dtype=float) - np.mean(y)
    den = np.sqrt((x @ x) * (y @ y))
    if den == 0:
        raise ZeroVariance("correlation with a constant vector")
    return float(x @ y / den)


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    """Named zone-level columns plus their provenance."""

    zone_ids: tuple
    columns: dict
    transforms: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "zone_ids", tuple(str(z) for z in self.zone_ids))
        cols = {}
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (len(self.zone_ids),):
                raise ValidationError(f"column {name!r} has {col.shape[0]} values for "
                                      f"{len(self.zone_ids)} zones")
            cols[name] = col
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "transforms", dict(self.transforms))

    @property
    def names(self):
        return tuple(self.columns)

    def matrix(self, names=None):
        names = self.names if names is None else tuple(names)
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise ValidationError(f"unknown covariates {missing}")
        if not names:
            return np.zeros((len(self.zone_ids), 0))
        return np.column_stack([self.columns[n] for n in names])

    def select(self, names):
        names = tuple(names)
        self.matrix(names)
        return CovariateMatrix(self.zone_ids, {n: self.columns[n] for n in names},
                               {n: self.transforms.get(n, {"op": "raw"}) for n in names})

    def reorder(self, zone_ids):
        """Rows in the order of ``zone_ids``."""
        zone_ids = tuple(str(z) for z in zone_ids)
        missing = [z for z in zone_ids if z not in self.zone_ids]
        if missing:
            raise UnknownZone(f"no covariates for zones {missing}")
        idx = [self.zone_ids.index(z) for z in zone_ids]
        return CovariateMatrix(zone_ids, {n: c[idx] for n, c in self.columns.items()},
                               self.transforms)

    def with_column(self, name, values, transform):
        cols = dict(self.columns)
        cols[name] = values
        tr = dict(self.transforms)
        tr[name] = transform
        return CovariateMatrix(self.zone_ids, cols, tr)

    def dichotomous(self, name):
        return self.transforms.get(name, {}).get("op") in ("dichotomize", "zone_dummy")

    def to_csv(self, path, names=None):
        names = self.names if names is None else tuple(names)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["zone_id", *names])
            for i, z in enumerate(self.zone_ids):
                w.writerow([z, *(repr(float(self.columns[n][i])) for n in names)])

    def transforms_json(self, path, names=None):
        names = self.names if names is None else tuple(names)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({n: self.transforms.get(n, {"op": "raw"}) for n in names}, fh, indent=2)
            fh.write("\n")


def load_covariates(path):
    """Read ``zone_id,<raw_var>...``; every value must be present and numeric."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if not header or header[0] != "zone_id":
            raise ValidationError(f"{path}: first column must be zone_id")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    zones, values = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path} row {lineno}: expected {len(header)} fields")
        zones.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise ValidationError(f"{path} row {lineno}: missing or non-numeric covariate") from None
    if len(set(zones)) != len(zones):
        raise ValidationError(f"{path}: duplicate zone ids")
    arr = np.array(values, dtype=float).reshape(len(zones), len(header) - 1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{path}: non-finite covariate values")
    cols = {name: arr[:, j] for j, name in enumerate(header[1:])}
    return CovariateMatrix(tuple(zones), cols, {n: {"op": "raw"} for n in cols})


def apply_recipe(raw, recipe, keep=None):
    """Run an ordered list of transform steps over raw zone variables.

    Each step is a dict with ``name`` (output column), ``op`` and its
    arguments:

    * ``standardize``: ``input``, optional ``invert``
    * ``composite``: ``inputs``, optional ``invert`` (list of flags)
    * ``residualize``: ``input``, ``on``
    * ``dichotomize``: ``inputs`` (two columns), optional ``ratio``

    Inputs may name raw variables or earlier outputs.  ``keep`` restricts and
    orders the returned columns (default: every step output, first-seen order).
    """
    raw_cols = dict(raw.columns)
    built = {}
    transforms = {}
    order = []

    def get(name):
        if name in built:
            return built[name]
        if name in raw_cols:
            return raw_cols[name]
        raise ValidationError(f"recipe refers to unknown column {name!r}")

    for step in recipe:
        step = dict(step)
        name, op = step.get("name"), step.get("op")
        if not name or not op:
            raise ValidationError(f"recipe step needs 'name' and 'op': {step}")
        if op == "standardize":
            _allowed(step, {"input", "invert"})
            out = standardize(get(step["input"]), bool(step.get("invert", False)))
            tr = {"op": op, "input": step["input"], "invert": bool(step.get("invert", False))}
        elif op == "composite":
            _allowed(step, {"inputs", "invert"})
            flags = [bool(f) for f in step.get("invert", [False] * len(step["inputs"]))]
            out = composite([get(c) for c in step["inputs"]], flags)
            tr = {"op": op, "inputs": list(step["inputs"]), "invert": flags}
        elif op == "residualize":
            _allowed(step, {"input", "on"})
            out = residualize(get(step["input"]), get(step["on"]))
            tr = {"op": op, "input": step["input"], "on": step["on"],
                  "from": transforms.get(step["input"], {"op": "raw"})}
        elif op == "dichotomize":
            _allowed(step, {"inputs", "ratio"})
            a, b = step["inputs"]
            ratio = float(step.get("ratio", 1.5))
            out = dichotomize_tradition(get(a), get(b), ratio)
            tr = {"op": op, "inputs": [a, b], "ratio": ratio}
        else:
            raise ValidationError(f"unknown recipe op {op!r}")
        built[name] = out
        transforms[name] = tr
        if name not in order:
            order.append(name)
    names = order if keep is None else list(keep)
    for n in names:
        if n not in built and n not in raw_cols:
            raise ValidationError(f"covariate {n!r} is not produced by the recipe")
    return CovariateMatrix(raw.zone_ids, {n: get(n) for n in names},
                           {n: transforms.get(n, {"op": "raw"}) for n in names})


def _allowed(step, extra):
    unknown = set(step) - {"name", "op"} - extra
    if unknown:
        raise ValidationError(f"recipe step {step['name']!r}: unknown keys {sorted(unknown)}")


def correlation_report(M, threshold=DEFAULT_CORRELATION_FLAG):
    """Pearson correlation matrix and the pairs whose |r| exceeds ``threshold``."""
    names = M.names
    if len(names) < 2:
        raise ValidationError("correlation_report needs at least two columns")
    X = M.matrix()
    R = np.corrcoef(X, rowvar=False)
    np.fill_diagonal(R, 1.0)
    flagged = [(names[a], names[b], float(R[a, b]))
               for a in range(len(names)) for b in range(a + 1, len(names))
               if abs(R[a, b]) > threshold]
    return {"names": names, "matrix": R, "flagged": flagged}


def add_zone_dummies(X, zones):
    """Append an unstandardized 0/1 indicator column for each zone in ``zones``."""
    out = X
    for z in zones:
        z = str(z)
        if z not in X.zone_ids:
            raise UnknownZone(f"zone {z!r} not in covariate matrix")
        col = np.array([1.0 if zid == z else 0.0 for zid in X.zone_ids])
        out = out.with_column(f"zone_{z}", col, {"op": "zone_dummy", "zone": z})
    return out
