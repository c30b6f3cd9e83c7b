"""Command-line pipeline: ``flowcast <subcommand> --config path [--jobs N] [--out dir]``.

Subcommands
-----------
validate     check the config and every input file
estimate     zone transition estimates, flows.csv, volatility.csv
covariates   design matrix, transform provenance, correlation report
model        multinomial models per anchor (reads flows.csv)
report       table1/table3/tableC1 CSVs and SVG charts (reads earlier outputs)
simulate     write a synthetic dataset
pipeline     validate, estimate, covariates, model and report in turn

Exit status is 0 on success, 2 when validation fails and 3 when an
estimate does not converge.  Every subcommand finishes by rewriting
``manifest.json`` with the hashes of the inputs and of every output file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import reports
from .covariate_lab import add_zone_dummies, apply_recipe, correlation_report, load_covariates
from .data_model import (
    NO_VOTE,
    PartyAggregation,
    aggregate_parties,
    build_zones,
    load_stations,
    reconcile_electorates,
)
from .ei_estimator import REGION, EstimatorConfig, FlowTable, fit_zone, flow_counts, goodness_of_fit
from .errors import ConfigError, EstimationError, FlowcastError, MissingAnchor, ValidationError
from .synth_oracle import SynthSpec, generate
from .transition_mnl import (
    build_panel,
    fit,
    mask_with_dummies,
    marginal_effects,
    reported_effects,
    residual_diagnostics,
    significance_flags,
    stepwise_select,
)
from .volatility import aggregate_region, volatility_indexes, write_volatility_csv

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 2, 3

_MODEL_KEYS = {"anchor", "direction", "groups", "reference", "covariates", "dummies"}


@dataclass
class ModelSpec:
    anchor: str
    direction: str = "outgoing"
    groups: dict = field(default_factory=dict)
    reference: str | None = None
    covariates: list | None = None
    dummies: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    """Parsed run configuration; relative paths are resolved against the config file."""

    base: Path
    stations: Path | None = None
    covariates: Path | None = None
    aggregation: Path | None = None
    schema: dict = field(default_factory=dict)
    long_format: bool = False
    min_stations: int = 10
    reconcile: str = "proportional-scale"
    abstention: str = NO_VOTE
    loyalty: object = "containment"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    recipe: list = field(default_factory=list)
    covariate_names: list | None = None
    models: list = field(default_factory=list)
    stepwise_schedule: list = field(default_factory=lambda: [0.5, 1.0])
    significance: list = field(default_factory=lambda: [0.01, 0.08])
    marginal_step: float = 1e-5
    residual_threshold: float = 2.0
    report_destinations: list = field(default_factory=lambda: ["FdI", NO_VOTE])
    output: Path | None = None
    seed: int = 0
    simulate: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc, base):
        known = set(cls.__dataclass_fields__) - {"base"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = Path(base)
        kw = dict(doc)
        for key in ("stations", "covariates", "aggregation", "output"):
            if kw.get(key) is not None:
                kw[key] = base / kw[key]
        kw["estimator"] = EstimatorConfig.from_dict(kw.get("estimator", {}))
        models = []
        for m in kw.get("models", []):
            extra = set(m) - _MODEL_KEYS
            if extra:
                raise ConfigError(f"model {m.get('anchor')!r}: unknown keys {sorted(extra)}")
            if "anchor" not in m:
                raise ConfigError("every model needs an 'anchor'")
            models.append(ModelSpec(**m))
        kw["models"] = models
        if kw.get("loyalty") == "positional":
            kw["loyalty"] = None
        return cls(base=base, **kw)

    def input_files(self):
        return {k: getattr(self, k) for k in ("stations", "covariates", "aggregation")
                if getattr(self, k) is not None}


# -- stages ----------------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise ConfigError(f"config has no {what!r} entry")
    if not Path(path).is_file():
        raise ConfigError(f"{what} file {path} does not exist")
    return path


def load_zones(cfg):
    records = load_stations(_require(cfg.stations, "stations"), cfg.schema or None,
                            long=cfg.long_format)
    if cfg.aggregation is not None:
        agg = PartyAggregation.from_json(_require(cfg.aggregation, "aggregation"))
        records = aggregate_parties(records, agg)
    zones = build_zones(records, min_stations=cfg.min_stations)
    return [reconcile_electorates(z, mode=cfg.reconcile) for z in zones]


def load_design(cfg):
    raw = load_covariates(_require(cfg.covariates, "covariates"))
    if not cfg.recipe:
        X = raw if cfg.covariate_names is None else raw.select(cfg.covariate_names)
    else:
        X = apply_recipe(raw, cfg.recipe, keep=cfg.covariate_names)
    return X


def validate(cfg, out=print):
    for key in ("stations", "covariates", "aggregation"):
        if getattr(cfg, key) is not None:
            _require(getattr(cfg, key), key)
    zones = load_zones(cfg)
    options1, options2 = zones[0].options1, zones[0].options2
    out(f"{len(zones)} zones, {sum(len(z) for z in zones)} stations")
    out(f"origins: {', '.join(options1)}")
    out(f"destinations: {', '.join(options2)}")
    if cfg.covariates is not None:
        X = load_design(cfg)
        missing = [z.zone_id for z in zones if z.zone_id not in X.zone_ids]
        if missing:
            raise ValidationError(f"no covariates for zones {missing}")
        out(f"covariates: {', '.join(X.names)}")
    for m in cfg.models:
        keys = options1 if m.direction == "outgoing" else options2
        if m.anchor not in keys:
            raise MissingAnchor(f"model anchor {m.anchor!r} is not a {m.direction} option")
    for z in zones:
        for w in z.warnings:
            out(f"warning: zone {z.zone_id}: {w}")
    return zones


def _estimate_zone(args):
    z, est_cfg = args
    try:
        est = fit_zone(z, est_cfg)
        flows = flow_counts(est, z, est_cfg)
        gof = goodness_of_fit(est, z)
        return z.zone_id, est, flows, gof, None
    except EstimationError as exc:
        return z.zone_id, None, None, None, f"{type(exc).__name__}: {exc}"


def _pool_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def write_flows_csv(tables, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zone_id", "origin", "destination", "count", "se"])
        for t in tables:
            for i, o in enumerate(t.origin_labels):
                for j, d in enumerate(t.destination_labels):
                    se = "" if t.se is None else repr(float(t.se[i, j]))
                    w.writerow([t.zone_id, o, d, repr(float(t.F[i, j])), se])


def read_flows_csv(path):
    if not Path(path).is_file():
        raise ValidationError(f"{path} not found; run 'estimate' first")
    cells = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            z = cells.setdefault(row["zone_id"], {})
            z[(row["origin"], row["destination"])] = (float(row["count"]),
                                                      float(row["se"]) if row["se"] else None)
    tables = []
    for zid, c in cells.items():
        origins = tuple(dict.fromkeys(o for o, _ in c))
        dests = tuple(dict.fromkeys(d for _, d in c))
        F = np.array([[c[(o, d)][0] for d in dests] for o in origins])
        ses = [[c[(o, d)][1] for d in dests] for o in origins]
        se = None if any(v is None for r in ses for v in r) else np.array(ses)
        tables.append(FlowTable.from_counts(zid, origins, dests, F, se))
    return tables


def estimate(cfg, out_dir, jobs=1, out=print):
    zones = load_zones(cfg)
    est_dir = out_dir / "estimates"
    est_dir.mkdir(parents=True, exist_ok=True)
    results = _pool_map(_estimate_zone, [(z, cfg.estimator) for z in zones], jobs)
    tables, failures, records = [], [], []
    for z, (zid, est, flows, gof, err) in zip(zones, results):
        if err:
            failures.append({"stage": "estimate", "zone": zid, "error": err})
            out(f"zone {zid}: {err}")
            continue
        doc = est.to_dict()
        doc["flows"] = flows.F.tolist()
        doc["flow_se"] = flows.se.tolist()
        doc["pseudo_r2"] = gof["pseudo_r2"]
        doc["station_chi2"] = gof["chi2"].tolist()
        doc["warnings"] = list(z.warnings)
        reports.write_json(doc, est_dir / f"zone_{_safe(zid)}.json")
        tables.append(flows)
        records.append(volatility_indexes(flows, cfg.abstention, cfg.loyalty))
    write_flows_csv(tables, out_dir / "flows.csv")
    if tables:
        region = aggregate_region(tables, REGION)
        records.append(volatility_indexes(region, cfg.abstention, cfg.loyalty))
    write_volatility_csv(records, out_dir / "volatility.csv")
    reports.write_json({"failures": failures}, out_dir / "estimate_status.json")
    out(f"estimated {len(tables)} of {len(zones)} zones")
    return failures


def covariates(cfg, out_dir, out=print):
    X = load_design(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    X.to_csv(out_dir / "covariates.out.csv")
    X.transforms_json(out_dir / "transforms.json")
    cont = [n for n in X.names if not X.dichotomous(n)]
    if len(cont) >= 2:
        rep = correlation_report(X.select(cont))
        reports.write_json({"names": list(rep["names"]), "matrix": rep["matrix"].tolist(),
                            "flagged": [list(f) for f in rep["flagged"]]},
                           out_dir / "correlations.json")
        for a, b, r in rep["flagged"]:
            out(f"correlated covariates: {a} / {b} (r = {r:.2f})")
    out(f"{len(X.names)} covariates for {len(X.zone_ids)} zones")
    return X


def _fit_model(args):
    spec, flows, X, cfg = args
    try:
        panel = build_panel(flows, spec.anchor, spec.direction, spec.groups or None)
        names = spec.covariates or list(X.names)
        m = stepwise_select(panel, X, schedule=cfg.stepwise_schedule, reference=spec.reference,
                            covariates=names)
        initial = residual_diagnostics(m, panel, cfg.residual_threshold)
        extra = {"initial_outliers": initial["outliers"], "dummies": {}}
        if spec.dummies:
            zones = list(spec.dummies)
            Xd = add_zone_dummies(X, zones)
            cells = {f"zone_{z}": list(opts) for z, opts in spec.dummies.items()}
            mask, all_names = mask_with_dummies(m, cells)
            steps = m.info.get("steps", [])
            m = fit(panel, Xd, mask=mask, reference=spec.reference, covariates=all_names)
            m.info["steps"] = steps
            extra["dummies"] = cells
        diag = residual_diagnostics(m, panel, cfg.residual_threshold)
        eff = marginal_effects(m, cfg.marginal_step)
        flags = significance_flags(m, tuple(cfg.significance))
        rep_eff = reported_effects(m, cfg.marginal_step, tuple(cfg.significance))
        return spec.anchor, reports.model_report(m, panel, diag, eff, rep_eff, flags, extra), None
    except EstimationError as exc:
        return spec.anchor, None, f"{type(exc).__name__}: {exc}"


def model(cfg, out_dir, jobs=1, out=print):
    flows = read_flows_csv(out_dir / "flows.csv")
    X = load_design(cfg)
    results = _pool_map(_fit_model, [(m, flows, X, cfg) for m in cfg.models], jobs)
    failures = []
    for spec, (anchor, rep, err) in zip(cfg.models, results):
        if err:
            failures.append({"stage": "model", "anchor": anchor, "error": err})
            out(f"model {anchor}: {err}")
            continue
        reports.write_json(rep, out_dir / f"model_report_{_safe(anchor)}.json")
        out(f"model {anchor}: {rep['pct_deviance_explained']:.1f}% deviance explained, "
            f"{len(rep['outliers'])} outlying cells")
    reports.write_json({"failures": failures}, out_dir / "model_status.json")
    return failures


def report(cfg, out_dir, out=print):
    flows = read_flows_csv(out_dir / "flows.csv")
    region = aggregate_region(flows, REGION)
    reports.write_rows(reports.table1_rows(region), out_dir / "table1.csv")
    pct = 100.0 * region.F / region.F.sum(axis=1, keepdims=True)
    reports.write_text(reports.heatmap_svg(pct, region.origin_labels, region.destination_labels,
                                           "Regional transitions (% of row)", vmax=100.0),
                       out_dir / "transitions_heatmap.svg")
    vol = out_dir / "volatility.csv"
    if vol.is_file():
        with open(vol, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.DictReader(fh) if r["zone_id"] != REGION]
        series = [[float(r["party_switch_pct"]) for r in rows],
                  [float(r["to_abstention_pct"]) for r in rows]]
        reports.write_text(reports.bar_chart_svg([r["zone_id"] for r in rows], series,
                                                 ["between parties", "to abstention"],
                                                 "Zone volatility (%)"),
                           out_dir / "volatility_bars.svg")
    reps = []
    for m in cfg.models:
        p = out_dir / f"model_report_{_safe(m.anchor)}.json"
        if p.is_file():
            with open(p, encoding="utf-8") as fh:
                reps.append(json.load(fh))
    if reps:
        names = list(dict.fromkeys(c for r in reps for c in r["covariates"]
                                   if not c.startswith("zone_")))
        reports.write_rows(reports.table3_rows(reps, names, cfg.report_destinations),
                           out_dir / "table3.csv")
        reports.write_rows(reports.tableC1_rows(reps, names), out_dir / "tableC1.csv")
        for r in reps:
            z = np.array(r["z"])
            reports.write_text(
                reports.heatmap_svg(z, r["nonref"], r["covariates"],
                                    f"z ratios, {r['direction']} {r['anchor']}", fmt="{:.2f}"),
                out_dir / f"model_{_safe(r['anchor'])}_z.svg")
    out(f"reports written to {out_dir}")


def simulate(cfg, out_dir, out=print):
    opts = dict(cfg.simulate)
    target = opts.pop("out", "simulated")
    opts.setdefault("seed", cfg.seed)
    try:
        spec = SynthSpec(**opts)
    except TypeError as exc:
        raise ConfigError(f"simulate: {exc}") from None
    paths = generate(spec, out_dir / target)
    out(f"synthetic data written to {paths['stations'].parent}")
    return paths


# -- manifest ----------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg, out_dir):
    """Hashes of inputs and outputs plus a summary; no timestamps, sorted keys."""
    inputs = {k: _sha256(p) for k, p in sorted(cfg.input_files().items()) if Path(p).is_file()}
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out_dir).as_posix()] = _sha256(p)
    failures = []
    for status in ("estimate_status.json", "model_status.json"):
        if (out_dir / status).is_file():
            with open(out_dir / status, encoding="utf-8") as fh:
                failures.extend(json.load(fh)["failures"])
    summary = {
        "zone_estimates": sum(1 for k in outputs if k.startswith("estimates/zone_")),
        "models": sum(1 for k in outputs if k.startswith("model_report_")),
        "volatility_reports": int("volatility.csv" in outputs),
    }
    doc = {"inputs": inputs, "outputs": outputs, "summary": summary, "failures": failures}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


# -- entry point -------------------------------------------------------------------

def _jobs(value):
    if value is None:
        env = os.environ.get("FLOWCAST_JOBS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"FLOWCAST_JOBS must be an integer, got {env!r}") from None
    value = 1 if value is None else value
    if value < 1:
        raise ConfigError("--jobs must be at least 1")
    return value


def build_parser():
    p = argparse.ArgumentParser(prog="flowcast", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=["validate", "estimate", "covariates", "model", "report",
                                       "simulate", "pipeline"])
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: $FLOWCAST_JOBS or 1)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    return p


def run(command, config, jobs=None, out_dir=None, out=print):
    """Run one subcommand and return its exit status."""
    try:
        cfg = RunConfig.load(config)
        jobs = _jobs(jobs)
        if out_dir is not None:
            target = Path(out_dir)
        elif cfg.output is not None:
            target = cfg.output
        else:
            target = Path("flowcast_out")
        failures = []
        if command == "validate":
            validate(cfg, out)
            return EXIT_OK
        target.mkdir(parents=True, exist_ok=True)
        if command == "pipeline":
            validate(cfg, out)
        if command in ("estimate", "pipeline"):
            failures += estimate(cfg, target, jobs, out)
        if command in ("covariates", "pipeline"):
            covariates(cfg, target, out)
        if command in ("model", "pipeline"):
            failures += model(cfg, target, jobs, out)
        if command in ("report", "pipeline"):
            report(cfg, target, out)
        if command == "simulate":
            simulate(cfg, target, out)
        write_manifest(cfg, target)
        return EXIT_ESTIMATION if failures else EXIT_OK
    except ValidationError as exc:
        out(f"error: {type(exc).__name__}: {exc}")
        return EXIT_VALIDATION
    except EstimationError as exc:
        out(f"error: {type(exc).__name__}: {exc}")
        return EXIT_ESTIMATION
    except FlowcastError as exc:
        out(f"error: {type(exc).__name__}: {exc}")
        return EXIT_VALIDATION


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.jobs, args.out)


if __name__ == "__main__":
    sys.exit(main())
